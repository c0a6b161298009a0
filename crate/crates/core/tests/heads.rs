use geomae_core::autograd::Graph;
use geomae_core::heads::{
    classify, prepare_chip, regress_gpp, segment_convup, segment_deconv, weighted_cross_entropy, AuxVariables,
    ClassifierHead, ConvUpHead, ConvUpHeadConfig, DeconvHead, DeconvHeadConfig, GppHead, GppHeadConfig,
    LatentGrid, PrepareMode,
};
use geomae_core::mae::{Encoder, EncoderConfig, init_params};
use geomae_core::nn::ParamStore;
use geomae_core::patchify::{grid_dims, PatchSize, ReflectanceBatch};
use geomae_core::seed::rng_for;
use geomae_core::Tensor;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "t");
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn zero(store: &mut ParamStore, id: geomae_core::nn::ParamId) {
    store.get_mut(id).data_mut().fill(0.0);
}

#[test]
fn classifier_examples() {
    let mut store = ParamStore::new();
    let head = ClassifierHead::init(4, 3, &mut store, &mut rng_for(1, "init")).unwrap();
    let w = store.id("head.cls.weight").unwrap();
    let b = store.id("head.cls.bias").unwrap();

    // Two tokens: mean then matmul.
    let lat = LatentGrid::new(random(&[1, 2, 4], 2), (1, 1, 2)).unwrap();
    let got = classify(&lat, &head, &store).unwrap();
    let (x, wt) = (lat.data.data(), store.get(w).data());
    for c in 0..3 {
        let want: f64 = (0..4).map(|d| 0.5 * (x[d] + x[4 + d]) * wt[d * 3 + c]).sum();
        assert!((got.data()[c] - want).abs() < 1e-15);
    }

    // One token: pooling is the identity.
    let one = LatentGrid::new(random(&[1, 1, 4], 3), (1, 1, 1)).unwrap();
    let got = classify(&one, &head, &store).unwrap();
    let want: f64 = (0..4).map(|d| one.data.data()[d] * store.get(w).data()[d * 3]).sum();
    assert!((got.data()[0] - want).abs() < 1e-15);

    zero(&mut store, w);
    store.get_mut(b).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    let got = classify(&lat, &head, &store).unwrap();
    assert_eq!(got.data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn deconv_reaches_exact_size_with_and_without_resize() {
    for (grid, out) in [(14, 224), (16, 224)] {
        let mut store = ParamStore::new();
        let cfg = DeconvHeadConfig {
            in_channels: 4,
            widths: [4, 4, 2, 2],
            n_classes: 2,
        };
        let head = DeconvHead::init(cfg, &mut store, &mut rng_for(4, "init")).unwrap();
        let lat = LatentGrid::new(random(&[1, grid * grid, 4], 5), (1, grid, grid)).unwrap();
        let y = segment_deconv(&lat, &head, &store, (out, out)).unwrap();
        assert_eq!(y.shape(), &[1, 2, out, out]);
    }
}

#[test]
fn deconv_size_contract() {
    let mut store = ParamStore::new();
    let head = DeconvHead::init(DeconvHeadConfig::new(4, 2), &mut store, &mut rng_for(6, "init")).unwrap();
    let lat = LatentGrid::new(random(&[2, 2 * 4, 2], 7), (2, 2, 2)).unwrap();
    let direct = segment_deconv(&lat, &head, &store, (32, 32)).unwrap();
    assert_eq!(direct.shape(), &[2, 2, 32, 32]);
    assert_eq!(segment_deconv(&lat, &head, &store, (33, 31)).unwrap().shape(), &[2, 2, 33, 31]);
    assert!(segment_deconv(&lat, &head, &store, (1, 8)).is_err());
}

#[test]
fn zeroed_classifiers_give_uniform_logits() {
    let lat = LatentGrid::new(Tensor::full(&[1, 4, 3], 0.4), (1, 2, 2)).unwrap();

    let mut store = ParamStore::new();
    let head = DeconvHead::init(DeconvHeadConfig::new(3, 3), &mut store, &mut rng_for(8, "init")).unwrap();
    let (w, b) = head.classifier();
    zero(&mut store, w);
    zero(&mut store, b);
    let y = segment_deconv(&lat, &head, &store, (32, 32)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let mut store = ParamStore::new();
    let cfg = ConvUpHeadConfig::new(3, (2, 2), (32, 32), 3).unwrap();
    let head = ConvUpHead::init(cfg, &mut store, &mut rng_for(9, "init")).unwrap();
    let (w, b) = head.classifier();
    zero(&mut store, w);
    zero(&mut store, b);
    let y = segment_convup(&lat, &head, &store, (32, 32)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn convup_shapes() {
    let cfg = ConvUpHeadConfig::new(6, (2, 2), (32, 32), 4).unwrap();
    assert_eq!(cfg.widths.len(), 4);
    let mut store = ParamStore::new();
    let head = ConvUpHead::init(cfg, &mut store, &mut rng_for(10, "init")).unwrap();
    let lat = LatentGrid::new(random(&[3, 8, 3], 11), (2, 2, 2)).unwrap();
    let y = segment_convup(&lat, &head, &store, (32, 32)).unwrap();
    assert_eq!(y.shape(), &[3, 4, 32, 32]);
    assert!(segment_convup(&lat, &head, &store, (30, 32)).unwrap().shape() == [3, 4, 30, 32]);
    assert!(ConvUpHeadConfig::new(6, (2, 2), (1, 1), 4).is_err());

    let cfg = ConvUpHeadConfig::new(4, (14, 14), (224, 224), 2).unwrap();
    let mut store = ParamStore::new();
    let head = ConvUpHead::init(cfg, &mut store, &mut rng_for(12, "init")).unwrap();
    let lat = LatentGrid::new(random(&[1, 196, 4], 13), (1, 14, 14)).unwrap();
    assert_eq!(segment_convup(&lat, &head, &store, (224, 224)).unwrap().shape(), &[1, 2, 224, 224]);
}

#[test]
fn weighted_cross_entropy_examples() {
    let uniform = Tensor::zeros(&[1, 2, 2, 2]);
    let l = weighted_cross_entropy(&uniform, &[0, 1, 1, 0], &[1.0, 1.0]).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);

    let logits = random(&[1, 2, 1, 3], 14);
    let labels = [1, 0, 1];
    let a = weighted_cross_entropy(&logits, &labels, &[2.0, 8.0]).unwrap();
    let b = weighted_cross_entropy(&logits, &labels, &[4.0, 16.0]).unwrap();
    assert!((a - b).abs() < 1e-15);

    // Per-pixel oracle.
    let x = logits.data();
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, &y) in labels.iter().enumerate() {
        let (z0, z1) = (x[p], x[3 + p]);
        let lse = (z0.exp() + z1.exp()).ln();
        let w = [2.0, 8.0][y];
        num += w * (lse - [z0, z1][y]);
        den += w;
    }
    assert!((a - num / den).abs() < 1e-14);

    let equal = weighted_cross_entropy(&logits, &labels, &[3.0, 3.0]).unwrap();
    let plain: f64 = labels
        .iter()
        .enumerate()
        .map(|(p, &y)| (x[p].exp() + x[3 + p].exp()).ln() - x[y * 3 + p])
        .sum::<f64>()
        / 3.0;
    assert!((equal - plain).abs() < 1e-15);

    assert!(weighted_cross_entropy(&logits, &[0, 2, 1], &[1.0, 1.0]).is_err());
}

fn conv3x3_relu(x: &[f64], cin: usize, h: usize, w: usize, wt: &Tensor, b: &Tensor) -> Vec<f64> {
    let cout = wt.shape()[0];
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b.data()[o];
                for c in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += x[(c * h + sy as usize) * w + sx as usize] * wt.data()[((o * cin + c) * 3 + ky) * 3 + kx];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s.max(0.0);
            }
        }
    }
    out
}

fn dense(x: &[f64], w: &Tensor, b: &Tensor, relu: bool) -> Vec<f64> {
    let n = w.shape()[1];
    (0..n)
        .map(|j| {
            let v = b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.data()[i * n + j]).sum::<f64>();
            if relu { v.max(0.0) } else { v }
        })
        .collect()
}

#[test]
fn gpp_forward_matches_hand_composition() {
    let mut cfg = GppHeadConfig::new(6, 2, (3, 3));
    cfg.hidden = 4;
    cfg.conv_widths = [3, 2, 2];
    cfg.aux_hidden = 5;
    let mut store = ParamStore::new();
    let head = GppHead::init(cfg, &mut store, &mut rng_for(15, "init")).unwrap();
    // Larger weights so ReLUs switch both ways.
    for (id, _, _) in store.iter().map(|(i, n, t)| (i, n.to_string(), t.clone())).collect::<Vec<_>>() {
        let mut rng = rng_for(id.index() as u64, "w");
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let lat = LatentGrid::new(random(&[2, 3, 2], 16), (1, 1, 3)).unwrap();
    let aux = AuxVariables::new(random(&[2, 2, 3, 3], 17)).unwrap();
    let got = regress_gpp(&lat, &aux, &head, &store).unwrap();
    let p = |n: &str| store.get(store.id(&format!("head.gpp.{n}")).unwrap()).clone();
    for b in 0..2 {
        let a = dense(&lat.data.data()[b * 6..(b + 1) * 6], &p("a1.weight"), &p("a1.bias"), true);
        let a = dense(&a, &p("a2.weight"), &p("a2.bias"), true);
        let x = &aux.values.data()[b * 18..(b + 1) * 18];
        let c = conv3x3_relu(x, 2, 3, 3, &p("c1.weight"), &p("c1.bias"));
        let c = conv3x3_relu(&c, 3, 3, 3, &p("c2.weight"), &p("c2.bias"));
        let c = conv3x3_relu(&c, 2, 3, 3, &p("c3.weight"), &p("c3.bias"));
        let c = dense(&c, &p("b.weight"), &p("b.bias"), true);
        let cat: Vec<f64> = a.into_iter().chain(c).collect();
        let want = dense(&cat, &p("out.weight"), &p("out.bias"), false)[0];
        assert!((got[b] - want).abs() < 1e-12, "{} vs {want}", got[b]);
    }

    let (w, bias) = head.output();
    zero(&mut store, w);
    store.get_mut(bias).data_mut()[0] = 3.25;
    assert_eq!(regress_gpp(&lat, &aux, &head, &store).unwrap(), vec![3.25, 3.25]);
}

#[test]
fn gpp_training_leaves_backbone_gradient_zero() {
    let enc_cfg = EncoderConfig {
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        patch: PatchSize::square(4),
        channels: 3,
    };
    let mut store = ParamStore::new();
    let mut rng = rng_for(18, "init");
    init_params(&enc_cfg.param_specs(), &mut store, &mut rng);
    let enc = Encoder::bind(enc_cfg, &store).unwrap();
    let dims = grid_dims(1, 8, 8, enc_cfg.patch).unwrap();
    let l = dims.0 * dims.1 * dims.2;
    let head = GppHead::init(GppHeadConfig::new(l * 8, 4, (5, 5)), &mut store, &mut rng).unwrap();

    let batch = ReflectanceBatch::new(random(&[2, 1, 3, 8, 8], 19).map(f64::abs), None).unwrap();
    let aux = AuxVariables::new(random(&[2, 4, 5, 5], 20)).unwrap();
    let mut g = Graph::new();
    let (latent, _) = enc.encode_all(&mut g, &store, &batch).unwrap();
    let pred = head.forward(&mut g, &store, latent, &aux).unwrap();
    let loss = g.mse(pred, &Tensor::from_vec(&[2, 1], vec![4.0, 7.5]).unwrap()).unwrap();
    let grads = g.backward(loss).unwrap().param_grads(&store);

    let backbone: f64 = enc.param_ids(&store).iter().map(|id| grads[id.index()].sq_norm()).sum();
    assert_eq!(backbone, 0.0);
    let head_norm: f64 = grads.iter().map(Tensor::sq_norm).sum();
    assert!(head_norm > 0.0);
}

#[test]
fn prepare_chip_then_patchify() {
    let chip = random(&[1, 1, 6, 512, 512], 21);
    let resized = prepare_chip(&chip, (448, 448), PrepareMode::ResizeBilinear).unwrap();
    assert_eq!(grid_dims(1, 448, 448, PatchSize::square(14)).unwrap(), (1, 32, 32));
    assert_eq!(resized.shape(), &[1, 1, 6, 448, 448]);
    assert!(grid_dims(1, 512, 512, PatchSize::square(14)).is_err());
    let up = prepare_chip(&random(&[6, 50, 50], 22), (224, 224), PrepareMode::Upscale).unwrap();
    assert_eq!(up.shape(), &[6, 224, 224]);
}
