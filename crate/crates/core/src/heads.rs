//! Task heads that sit on top of an encoder run without masking.

use rand::Rng;

use crate::autograd::{self, Graph, NodeId};
use crate::error::{invalid, Result};
use crate::mae::{init_params, Init, ParamSpec, LN_EPS};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Encoder output over the full token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    /// `[B, L, D]`.
    pub data: Tensor,
    /// `(T, Gh, Gw)`.
    pub dims: (usize, usize, usize),
}

impl LatentGrid {
    pub fn new(data: Tensor, dims: (usize, usize, usize)) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[1] != dims.0 * dims.1 * dims.2 {
            return Err(invalid!("latent {s:?} does not cover grid {dims:?}"));
        }
        Ok(LatentGrid { data, dims })
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Co-located auxiliary variables `[B, K, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxVariables {
    pub values: Tensor,
}

impl AuxVariables {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 4 || !values.all_finite() {
            return Err(invalid!("auxiliary variables must be a finite [B, K, h, w] array"));
        }
        Ok(AuxVariables { values })
    }
}

fn bind(store: &ParamStore, specs: &[ParamSpec]) -> Result<Vec<ParamId>> {
    specs
        .iter()
        .map(|s| {
            let id = store
                .id(&s.name)
                .ok_or_else(|| invalid!("parameter {} missing", s.name))?;
            if store.get(id).shape() != s.shape.as_slice() {
                return Err(invalid!("parameter {} has shape {:?}", s.name, store.get(id).shape()));
            }
            Ok(id)
        })
        .collect()
}

/// `[B, T·Gh·Gw, D]` → `[B, T·D, Gh, Gw]`, frames stacked along channels.
pub fn frames_to_channels(g: &mut Graph, x: NodeId, dims: (usize, usize, usize)) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    let (t, gh, gw) = dims;
    if s.len() != 3 || s[1] != t * gh * gw {
        return Err(invalid!("latent {s:?} does not cover grid {dims:?}"));
    }
    let (b, d) = (s[0], s[2]);
    let y = g.reshape(x, &[b, t, gh, gw, d])?;
    let y = g.permute(y, &[0, 1, 4, 2, 3])?;
    g.reshape(y, &[b, t * d, gh, gw])
}

fn check_out_size(grid: (usize, usize), out: (usize, usize)) -> Result<()> {
    if out.0 < grid.0 || out.1 < grid.1 {
        return Err(invalid!(
            "output size {}x{} smaller than token grid {}x{}",
            out.0,
            out.1,
            grid.0,
            grid.1
        ));
    }
    Ok(())
}

/// Mean-pooled tokens followed by one affine map.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub n_classes: usize,
    w: ParamId,
    b: ParamId,
}

impl ClassifierHead {
    pub fn specs(dim: usize, n_classes: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("head.cls.weight", &[dim, n_classes], Init::Normal),
            ParamSpec::new("head.cls.bias", &[n_classes], Init::Zeros),
        ]
    }

    pub fn init(dim: usize, n_classes: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        init_params(&Self::specs(dim, n_classes), store, rng);
        Self::bind(dim, n_classes, store)
    }

    pub fn bind(dim: usize, n_classes: usize, store: &ParamStore) -> Result<Self> {
        let ids = bind(store, &Self::specs(dim, n_classes))?;
        Ok(ClassifierHead {
            n_classes,
            w: ids[0],
            b: ids[1],
        })
    }

    /// `[B, L, D]` → logits `[B, n_classes]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: NodeId) -> Result<NodeId> {
        let pooled = g.mean_rows(latent)?;
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        g.linear(pooled, w, Some(b))
    }
}

pub fn classify(latent: &LatentGrid, head: &ClassifierHead, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(latent.data.clone());
    let y = head.forward(&mut g, store, x)?;
    Ok(g.value(y).clone())
}

/// Channel widths that halve from `input` per block, never below `floor`.
pub fn halving_widths(input: usize, blocks: usize, floor: usize) -> Vec<usize> {
    let mut w = input;
    (0..blocks)
        .map(|_| {
            w = (w / 2).max(floor);
            w
        })
        .collect()
}

/// Layer norm over the channel axis of `[B, C, H, W]`.
fn channel_norm(g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let y = g.permute(x, &[0, 2, 3, 1])?;
    let y = g.layer_norm(y, gamma, beta, LN_EPS)?;
    g.permute(y, &[0, 3, 1, 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeconvHeadConfig {
    /// Channels entering the head: frames × encoder width.
    pub in_channels: usize,
    /// Output widths of the four transposed-convolution blocks.
    pub widths: [usize; 4],
    pub n_classes: usize,
}

impl DeconvHeadConfig {
    pub fn new(in_channels: usize, n_classes: usize) -> Self {
        let w = halving_widths(in_channels, 4, 8);
        DeconvHeadConfig {
            in_channels,
            widths: [w[0], w[1], w[2], w[3]],
            n_classes,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.widths.iter().enumerate() {
            v.push(ParamSpec::new(format!("head.deconv.{i}.weight"), &[cin, c, 2, 2], Init::Normal));
            v.push(ParamSpec::new(format!("head.deconv.{i}.bias"), &[c], Init::Zeros));
            v.push(ParamSpec::new(format!("head.deconv.{i}.norm.weight"), &[c], Init::Ones));
            v.push(ParamSpec::new(format!("head.deconv.{i}.norm.bias"), &[c], Init::Zeros));
            cin = c;
        }
        v.push(ParamSpec::new("head.fcn.weight", &[self.n_classes, cin, 1, 1], Init::Normal));
        v.push(ParamSpec::new("head.fcn.bias", &[self.n_classes], Init::Zeros));
        v
    }
}

/// Four stride-2 transposed convolutions (×16), a 1×1 classifier, and a
/// bilinear resize when the ×16 map misses the requested size.
#[derive(Clone, Debug)]
pub struct DeconvHead {
    pub cfg: DeconvHeadConfig,
    ids: Vec<ParamId>,
}

impl DeconvHead {
    pub fn init(cfg: DeconvHeadConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        init_params(&cfg.specs(), store, rng);
        Self::bind(cfg, store)
    }

    pub fn bind(cfg: DeconvHeadConfig, store: &ParamStore) -> Result<Self> {
        let ids = bind(store, &cfg.specs())?;
        Ok(DeconvHead { cfg, ids })
    }

    pub fn classifier(&self) -> (ParamId, ParamId) {
        (self.ids[16], self.ids[17])
    }

    /// Feature map `[B, C_in, Gh, Gw]` → logits `[B, n_classes, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, out: (usize, usize)) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(invalid!("deconv head expects [B, {}, Gh, Gw], got {s:?}", self.cfg.in_channels));
        }
        check_out_size((s[2], s[3]), out)?;
        let mut y = x;
        for blk in self.ids[..16].chunks(4) {
            let (w, b) = (g.param(store, blk[0]), g.param(store, blk[1]));
            y = g.conv_transpose2d(y, w, b, 2, 0)?;
            let (gm, bt) = (g.param(store, blk[2]), g.param(store, blk[3]));
            y = channel_norm(g, y, gm, bt)?;
            y = g.gelu(y);
        }
        let (w, b) = self.classifier();
        let (w, b) = (g.param(store, w), g.param(store, b));
        let y = g.conv2d(y, w, b, 0)?;
        if (16 * s[2], 16 * s[3]) == out {
            Ok(y)
        } else {
            g.resize_bilinear(y, out.0, out.1)
        }
    }
}

pub fn segment_deconv(
    latent: &LatentGrid,
    head: &DeconvHead,
    store: &ParamStore,
    out: (usize, usize),
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(latent.data.clone());
    let x = frames_to_channels(&mut g, x, latent.dims)?;
    let y = head.forward(&mut g, store, x, out)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUpHeadConfig {
    pub in_channels: usize,
    /// One width per upsample block.
    pub widths: Vec<usize>,
    pub n_classes: usize,
}

impl ConvUpHeadConfig {
    /// Enough ×2 blocks to reach `out` from `grid`.
    pub fn new(in_channels: usize, grid: (usize, usize), out: (usize, usize), n_classes: usize) -> Result<Self> {
        check_out_size(grid, out)?;
        let blocks = upsample_blocks(grid, out);
        Ok(ConvUpHeadConfig {
            in_channels,
            widths: halving_widths(in_channels, blocks, 8),
            n_classes,
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.widths.iter().enumerate() {
            v.push(ParamSpec::new(format!("head.up.{i}.weight"), &[c, cin, 3, 3], Init::Normal));
            v.push(ParamSpec::new(format!("head.up.{i}.bias"), &[c], Init::Zeros));
            cin = c;
        }
        v.push(ParamSpec::new("head.fcn.weight", &[self.n_classes, cin, 1, 1], Init::Normal));
        v.push(ParamSpec::new("head.fcn.bias", &[self.n_classes], Init::Zeros));
        v
    }
}

/// Smallest `n` with `grid · 2ⁿ ≥ out` on both axes.
pub fn upsample_blocks(grid: (usize, usize), out: (usize, usize)) -> usize {
    let mut n = 0;
    while (grid.0 << n) < out.0 || (grid.1 << n) < out.1 {
        n += 1;
    }
    n
}

/// Nearest ×2 upsampling, 3×3 convolution and ReLU per block, then a 1×1
/// classifier and a bilinear resize if the final map overshoots.
#[derive(Clone, Debug)]
pub struct ConvUpHead {
    pub cfg: ConvUpHeadConfig,
    ids: Vec<ParamId>,
}

impl ConvUpHead {
    pub fn init(cfg: ConvUpHeadConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        init_params(&cfg.specs(), store, rng);
        Self::bind(cfg, store)
    }

    pub fn bind(cfg: ConvUpHeadConfig, store: &ParamStore) -> Result<Self> {
        let ids = bind(store, &cfg.specs())?;
        Ok(ConvUpHead { cfg, ids })
    }

    pub fn classifier(&self) -> (ParamId, ParamId) {
        let n = self.ids.len();
        (self.ids[n - 2], self.ids[n - 1])
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, out: (usize, usize)) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(invalid!("conv-up head expects [B, {}, Gh, Gw], got {s:?}", self.cfg.in_channels));
        }
        check_out_size((s[2], s[3]), out)?;
        if upsample_blocks((s[2], s[3]), out) != self.cfg.widths.len() {
            return Err(invalid!(
                "head built for {} upsampling blocks cannot map {}x{} to {}x{}",
                self.cfg.widths.len(),
                s[2],
                s[3],
                out.0,
                out.1
            ));
        }
        let mut y = x;
        for blk in self.ids[..self.ids.len() - 2].chunks(2) {
            y = g.upsample_nearest(y, 2)?;
            let (w, b) = (g.param(store, blk[0]), g.param(store, blk[1]));
            y = g.conv2d(y, w, b, 1)?;
            y = g.relu(y);
        }
        let (w, b) = self.classifier();
        let (w, b) = (g.param(store, w), g.param(store, b));
        let y = g.conv2d(y, w, b, 0)?;
        if g.shape(y)[2..] == [out.0, out.1] {
            Ok(y)
        } else {
            g.resize_bilinear(y, out.0, out.1)
        }
    }
}

pub fn segment_convup(
    latent: &LatentGrid,
    head: &ConvUpHead,
    store: &ParamStore,
    out: (usize, usize),
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(latent.data.clone());
    let x = frames_to_channels(&mut g, x, latent.dims)?;
    let y = head.forward(&mut g, store, x, out)?;
    Ok(g.value(y).clone())
}

/// `Σ w_y · (−log softmax(logits)_y) / Σ w_y` over all pixels.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let l = g.weighted_cross_entropy(x, labels, weights)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GppHeadConfig {
    /// Flattened latent width `L · D`.
    pub latent_features: usize,
    pub hidden: usize,
    pub aux_channels: usize,
    pub aux_size: (usize, usize),
    pub conv_widths: [usize; 3],
    pub aux_hidden: usize,
}

impl GppHeadConfig {
    pub fn new(latent_features: usize, aux_channels: usize, aux_size: (usize, usize)) -> Self {
        GppHeadConfig {
            latent_features,
            hidden: 64,
            aux_channels,
            aux_size,
            conv_widths: [32, 64, 64],
            aux_hidden: 64,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let [c1, c2, c3] = self.conv_widths;
        let flat = c3 * self.aux_size.0 * self.aux_size.1;
        vec![
            ParamSpec::new("head.gpp.a1.weight", &[self.latent_features, self.hidden], Init::Normal),
            ParamSpec::new("head.gpp.a1.bias", &[self.hidden], Init::Zeros),
            ParamSpec::new("head.gpp.a2.weight", &[self.hidden, self.hidden], Init::Normal),
            ParamSpec::new("head.gpp.a2.bias", &[self.hidden], Init::Zeros),
            ParamSpec::new("head.gpp.c1.weight", &[c1, self.aux_channels, 3, 3], Init::Normal),
            ParamSpec::new("head.gpp.c1.bias", &[c1], Init::Zeros),
            ParamSpec::new("head.gpp.c2.weight", &[c2, c1, 3, 3], Init::Normal),
            ParamSpec::new("head.gpp.c2.bias", &[c2], Init::Zeros),
            ParamSpec::new("head.gpp.c3.weight", &[c3, c2, 3, 3], Init::Normal),
            ParamSpec::new("head.gpp.c3.bias", &[c3], Init::Zeros),
            ParamSpec::new("head.gpp.b.weight", &[flat, self.aux_hidden], Init::Normal),
            ParamSpec::new("head.gpp.b.bias", &[self.aux_hidden], Init::Zeros),
            ParamSpec::new("head.gpp.out.weight", &[self.hidden + self.aux_hidden, 1], Init::Normal),
            ParamSpec::new("head.gpp.out.bias", &[1], Init::Zeros),
        ]
    }
}

/// Two-branch regressor: an MLP on the flattened latent and a small CNN on
/// the auxiliary grid, concatenated into one linear output.
#[derive(Clone, Debug)]
pub struct GppHead {
    pub cfg: GppHeadConfig,
    ids: Vec<ParamId>,
}

impl GppHead {
    pub fn init(cfg: GppHeadConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        init_params(&cfg.specs(), store, rng);
        Self::bind(cfg, store)
    }

    pub fn bind(cfg: GppHeadConfig, store: &ParamStore) -> Result<Self> {
        let ids = bind(store, &cfg.specs())?;
        Ok(GppHead { cfg, ids })
    }

    pub fn output(&self) -> (ParamId, ParamId) {
        (self.ids[12], self.ids[13])
    }

    /// The latent is treated as a constant: nothing flows back into the
    /// network that produced it. Returns `[B, 1]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent: NodeId, aux: &AuxVariables) -> Result<NodeId> {
        let s = g.shape(latent).to_vec();
        let a = aux.values.shape();
        let b = s[0];
        let feats: usize = s[1..].iter().product();
        if feats != self.cfg.latent_features || a[0] != b || a[1] != self.cfg.aux_channels || (a[2], a[3]) != self.cfg.aux_size
        {
            return Err(invalid!(
                "regression head built for {} latent features and aux [{}, {}, {}], got latent {s:?} and aux {a:?}",
                self.cfg.latent_features,
                self.cfg.aux_channels,
                self.cfg.aux_size.0,
                self.cfg.aux_size.1
            ));
        }
        let frozen = g.value(latent).clone().reshape(&[b, feats])?;
        let x = g.input(frozen);
        let p = |g: &mut Graph, i: usize| g.param(store, self.ids[i]);

        let (w, c) = (p(g, 0), p(g, 1));
        let ya = g.linear(x, w, Some(c))?;
        let ya = g.relu(ya);
        let (w, c) = (p(g, 2), p(g, 3));
        let ya = g.linear(ya, w, Some(c))?;
        let ya = g.relu(ya);

        let mut yb = g.input(aux.values.clone());
        for i in [4, 6, 8] {
            let (w, c) = (p(g, i), p(g, i + 1));
            yb = g.conv2d(yb, w, c, 1)?;
            yb = g.relu(yb);
        }
        let flat: usize = g.shape(yb)[1..].iter().product();
        let yb = g.reshape(yb, &[b, flat])?;
        let (w, c) = (p(g, 10), p(g, 11));
        let yb = g.linear(yb, w, Some(c))?;
        let yb = g.relu(yb);

        let y = g.concat(&[ya, yb], 1)?;
        let (w, c) = (p(g, 12), p(g, 13));
        g.linear(y, w, Some(c))
    }
}

/// Per-sample prediction `[B]`.
pub fn regress_gpp(latent: &LatentGrid, aux: &AuxVariables, head: &GppHead, store: &ParamStore) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.input(latent.data.clone());
    let y = head.forward(&mut g, store, x, aux)?;
    Ok(g.value(y).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepareMode {
    /// Bilinear resampling, half-pixel centres (align-corners off).
    ResizeBilinear,
    /// Central window; fails if the target exceeds the source.
    CenterCrop,
    /// Bilinear enlargement; fails if the target is smaller than the source.
    Upscale,
}

impl std::str::FromStr for PrepareMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resize_bilinear" => Ok(PrepareMode::ResizeBilinear),
            "center_crop" => Ok(PrepareMode::CenterCrop),
            "upscale" => Ok(PrepareMode::Upscale),
            _ => Err(invalid!("unknown resampling mode {s:?}")),
        }
    }
}

/// Resamples the two trailing spatial axes of a chip of any rank ≥ 2.
pub fn prepare_chip(chip: &Tensor, target: (usize, usize), mode: PrepareMode) -> Result<Tensor> {
    let s = chip.shape();
    if s.len() < 2 || target.0 == 0 || target.1 == 0 {
        return Err(invalid!("cannot resample {s:?} to {}x{}", target.0, target.1));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let lead: usize = s[..s.len() - 2].iter().product();
    let mut out_shape = s.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = target.0;
    out_shape[n - 1] = target.1;
    match mode {
        PrepareMode::CenterCrop => {
            if target.0 > h || target.1 > w {
                return Err(invalid!("cannot crop {h}x{w} to {}x{}", target.0, target.1));
            }
            let (oy, ox) = ((h - target.0) / 2, (w - target.1) / 2);
            let mut data = Vec::with_capacity(lead * target.0 * target.1);
            for plane in chip.data().chunks(h * w) {
                for y in oy..oy + target.0 {
                    data.extend_from_slice(&plane[y * w + ox..y * w + ox + target.1]);
                }
            }
            Tensor::from_vec(&out_shape, data)
        }
        PrepareMode::ResizeBilinear | PrepareMode::Upscale => {
            if mode == PrepareMode::Upscale && (target.0 < h || target.1 < w) {
                return Err(invalid!("upscale from {h}x{w} to smaller {}x{}", target.0, target.1));
            }
            let x = chip.clone().reshape(&[1, lead, h, w])?;
            autograd::resize_bilinear(&x, target.0, target.1)?.reshape(&out_shape)
        }
    }
}
