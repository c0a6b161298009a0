//! Patch extraction, linear patch embedding, random masking and the inverse
//! reshaping back to pixel space.
//!
//! Tokens are ordered `l = t·Gh·Gw + i·Gw + j`. Inside a token the pixel cube
//! is flattened in (row, column, channel) order, so element
//! `(r·pw + c)·C + ch` holds channel `ch` of pixel `(r, c)` of the block.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::posenc::GeoTemporalMetadata;
use crate::tensor::Tensor;

/// Patch cube size `(t, h, w)`. Only `t = 1` is supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSize {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSize {
    pub fn square(side: usize) -> Self {
        PatchSize {
            t: 1,
            h: side,
            w: side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t != 1 {
            return Err(invalid!("temporal patch size must be 1, got {}", self.t));
        }
        if self.h == 0 || self.w == 0 {
            return Err(invalid!("spatial patch size must be positive"));
        }
        Ok(())
    }

    pub fn pixels(&self, channels: usize) -> usize {
        self.t * self.h * self.w * channels
    }
}

/// Multi-temporal chips `[B, T, C, H, W]` with optional per-sample metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectanceBatch {
    pub values: Tensor,
    pub meta: Option<Vec<GeoTemporalMetadata>>,
}

impl ReflectanceBatch {
    pub fn new(values: Tensor, meta: Option<Vec<GeoTemporalMetadata>>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 5 || s.contains(&0) {
            return Err(invalid!("batch must be a non-empty [B, T, C, H, W] array, got {s:?}"));
        }
        if !values.all_finite() {
            return Err(invalid!("batch contains non-finite reflectance"));
        }
        if let Some(m) = &meta {
            if m.len() != s[0] {
                return Err(invalid!("{} metadata records for batch of {}", m.len(), s[0]));
            }
            for r in m {
                r.validate(s[1])?;
            }
        }
        Ok(ReflectanceBatch { values, meta })
    }

    /// `(B, T, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3], s[4])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[B, L, D]`.
    pub data: Tensor,
    /// `(T, Gh, Gw)`.
    pub dims: (usize, usize, usize),
    pub patch: (usize, usize, usize),
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token grid `(T, Gh, Gw)` for a `[.., T, C, H, W]` input.
pub fn grid_dims(t: usize, h: usize, w: usize, patch: PatchSize) -> Result<(usize, usize, usize)> {
    patch.validate()?;
    if !h.is_multiple_of(patch.h) || !w.is_multiple_of(patch.w) {
        return Err(invalid!(
            "spatial size {h}x{w} not divisible by patch {}x{}",
            patch.h,
            patch.w
        ));
    }
    Ok((t, h / patch.h, w / patch.w))
}

/// `[B, T, C, H, W]` → `[B, L, ph·pw·C]`.
pub fn patchify_pixels(values: &Tensor, patch: PatchSize) -> Result<Tensor> {
    let s = values.shape();
    if s.len() != 5 {
        return Err(invalid!("expected [B, T, C, H, W], got {s:?}"));
    }
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let (_, gh, gw) = grid_dims(t, h, w, patch)?;
    let (ph, pw) = (patch.h, patch.w);
    let p = ph * pw * c;
    let l = t * gh * gw;
    let mut out = Tensor::zeros(&[b, l, p]);
    let src = values.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for ch in 0..c {
                let plane = (((bi * t + ti) * c) + ch) * h * w;
                for y in 0..h {
                    let (i, r) = (y / ph, y % ph);
                    for x in 0..w {
                        let (j, col) = (x / pw, x % pw);
                        let tok = (bi * l) + (ti * gh + i) * gw + j;
                        dst[tok * p + (r * pw + col) * c + ch] = src[plane + y * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify_pixels`].
pub fn unpatchify(
    tokens: &Tensor,
    dims: (usize, usize, usize),
    patch: PatchSize,
    channels: usize,
) -> Result<Tensor> {
    patch.validate()?;
    let s = tokens.shape();
    let (t, gh, gw) = dims;
    let (ph, pw) = (patch.h, patch.w);
    let p = patch.pixels(channels);
    if s.len() != 3 || s[1] != t * gh * gw || s[2] != p {
        return Err(invalid!(
            "token pixels {s:?} inconsistent with grid {dims:?}, patch {ph}x{pw}, {channels} channels"
        ));
    }
    let (b, l) = (s[0], s[1]);
    let (h, w) = (gh * ph, gw * pw);
    let mut out = Tensor::zeros(&[b, t, channels, h, w]);
    let src = tokens.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for ch in 0..channels {
                let plane = (((bi * t + ti) * channels) + ch) * h * w;
                for y in 0..h {
                    let (i, r) = (y / ph, y % ph);
                    for x in 0..w {
                        let (j, col) = (x / pw, x % pw);
                        let tok = (bi * l) + (ti * gh + i) * gw + j;
                        dst[plane + y * w + x] = src[tok * p + (r * pw + col) * channels + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Linear projection of pixel cubes: `weight: [ph·pw·C, D]`, `bias: [D]`.
/// Equivalent to a 3D convolution whose stride equals its kernel.
pub fn embed(batch: &ReflectanceBatch, weight: &Tensor, bias: &Tensor, patch: PatchSize) -> Result<TokenGrid> {
    let (_, t, c, h, w) = batch.dims();
    let dims = grid_dims(t, h, w, patch)?;
    let p = patch.pixels(c);
    if weight.shape().len() != 2 || weight.shape()[0] != p || bias.shape() != [weight.shape()[1]] {
        return Err(invalid!(
            "projection {:?} + {:?} does not map {p} pixel values",
            weight.shape(),
            bias.shape()
        ));
    }
    let pix = patchify_pixels(&batch.values, patch)?;
    let mut g = crate::autograd::Graph::new();
    let (x, wn, bn) = (g.input(pix), g.input(weight.clone()), g.input(bias.clone()));
    let y = g.linear(x, wn, Some(bn))?;
    Ok(TokenGrid {
        data: g.value(y).clone(),
        dims,
        patch: (patch.t, patch.h, patch.w),
    })
}

/// Per-sample random masking state.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub keep_count: usize,
    /// `shuffle[b][k]` is the original index of the `k`-th shuffled token.
    pub shuffle: Vec<Vec<usize>>,
    /// Inverse of `shuffle`: `restore[b][l]` is the shuffled position of token `l`.
    pub restore: Vec<Vec<usize>>,
    /// `true` marks a masked token.
    pub mask: Vec<Vec<bool>>,
}

impl MaskPlan {
    pub fn random(batch: usize, tokens: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(invalid!("mask ratio {ratio} outside [0, 1)"));
        }
        let keep_count = (tokens as f64 * (1.0 - ratio)).round() as usize;
        if keep_count == 0 {
            return Err(invalid!("mask ratio {ratio} leaves no visible token out of {tokens}"));
        }
        let shuffle = (0..batch)
            .map(|_| {
                let mut p: Vec<usize> = (0..tokens).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        Ok(Self::from_shuffle(shuffle, keep_count))
    }

    /// Builds a plan from explicit permutations.
    pub fn from_shuffle(shuffle: Vec<Vec<usize>>, keep_count: usize) -> Self {
        let restore = shuffle
            .iter()
            .map(|p| {
                let mut r = vec![0; p.len()];
                for (k, &l) in p.iter().enumerate() {
                    r[l] = k;
                }
                r
            })
            .collect();
        let mask = shuffle
            .iter()
            .map(|p| {
                let mut m = vec![true; p.len()];
                for &l in &p[..keep_count] {
                    m[l] = false;
                }
                m
            })
            .collect();
        MaskPlan {
            keep_count,
            shuffle,
            restore,
            mask,
        }
    }

    /// The identity plan: nothing masked, canonical order.
    pub fn identity(batch: usize, tokens: usize) -> Self {
        Self::from_shuffle(vec![(0..tokens).collect(); batch], tokens)
    }

    pub fn batch(&self) -> usize {
        self.shuffle.len()
    }

    pub fn tokens(&self) -> usize {
        self.shuffle.first().map_or(0, Vec::len)
    }

    pub fn keep_indices(&self) -> Vec<Vec<usize>> {
        self.shuffle.iter().map(|p| p[..self.keep_count].to_vec()).collect()
    }

    /// Sub-plan for a subset of samples.
    pub fn select(&self, samples: &[usize]) -> Self {
        MaskPlan {
            keep_count: self.keep_count,
            shuffle: samples.iter().map(|&i| self.shuffle[i].clone()).collect(),
            restore: samples.iter().map(|&i| self.restore[i].clone()).collect(),
            mask: samples.iter().map(|&i| self.mask[i].clone()).collect(),
        }
    }
}

/// Keeps the first `keep_count` tokens of a per-sample random permutation,
/// in shuffled order.
pub fn random_masking(tokens: &TokenGrid, ratio: f64, rng: &mut impl Rng) -> Result<(Tensor, MaskPlan)> {
    let s = tokens.data.shape();
    let plan = MaskPlan::random(s[0], s[1], ratio, rng)?;
    let visible = gather_tokens(&tokens.data, &plan.keep_indices())?;
    Ok((visible, plan))
}

fn gather_tokens(x: &Tensor, idx: &[Vec<usize>]) -> Result<Tensor> {
    let mut g = crate::autograd::Graph::new();
    let n = g.input(x.clone());
    let y = g.gather_rows(n, idx)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "batch");
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn single_block_token() {
        let x = Tensor::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify_pixels(&x, PatchSize::square(2)).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn token_counts() {
        let dims = grid_dims(4, 224, 224, PatchSize::square(16)).unwrap();
        assert_eq!(dims.0 * dims.1 * dims.2, 784);
        let dims = grid_dims(1, 224, 224, PatchSize::square(14)).unwrap();
        assert_eq!(dims.0 * dims.1 * dims.2, 256);
        assert!(grid_dims(1, 225, 224, PatchSize::square(16)).is_err());
        assert!(grid_dims(1, 32, 32, PatchSize { t: 2, h: 16, w: 16 }).is_err());
    }

    #[test]
    fn channel_order_within_token() {
        // 2 channels, 2x2 image, 2x2 patch: token = (r, c, ch) order
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], vec![1., 2., 3., 4., 10., 20., 30., 40.]).unwrap();
        let p = patchify_pixels(&x, PatchSize::square(2)).unwrap();
        assert_eq!(p.data(), &[1., 10., 2., 20., 3., 30., 4., 40.]);
    }

    #[test]
    fn unpatchify_round_trip_and_zeros() {
        let x = random_batch(&[1, 4, 6, 32, 32], 9);
        let patch = PatchSize::square(16);
        let p = patchify_pixels(&x, patch).unwrap();
        assert_eq!(unpatchify(&p, (4, 2, 2), patch, 6).unwrap(), x);
        let z = unpatchify(&Tensor::zeros(&[2, 8, 16 * 16 * 6]), (2, 2, 2), patch, 6).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(unpatchify(&p, (4, 2, 3), patch, 6).is_err());
    }

    #[test]
    fn embed_identity_and_zero_projection() {
        let x = random_batch(&[2, 2, 3, 4, 4], 1);
        let batch = ReflectanceBatch::new(x.clone(), None).unwrap();
        let patch = PatchSize::square(2);
        let p = 12;
        let eye = Tensor::from_fn(&[p, p], |i| if i / p == i % p { 1.0 } else { 0.0 });
        let tg = embed(&batch, &eye, &Tensor::zeros(&[p]), patch).unwrap();
        assert_eq!(tg.data, patchify_pixels(&x, patch).unwrap());
        let tg = embed(&batch, &Tensor::zeros(&[p, 5]), &Tensor::zeros(&[5]), patch).unwrap();
        assert!(tg.data.data().iter().all(|&v| v == 0.0));
        assert!(embed(&batch, &Tensor::zeros(&[p + 1, 5]), &Tensor::zeros(&[5]), patch).is_err());
    }

    #[test]
    fn embed_matches_per_token_matvec() {
        let x = random_batch(&[1, 1, 2, 4, 4], 2);
        let batch = ReflectanceBatch::new(x.clone(), None).unwrap();
        let patch = PatchSize::square(2);
        let mut rng = rng_for(3, "w");
        let w = Tensor::from_fn(&[8, 3], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let tg = embed(&batch, &w, &b, patch).unwrap();
        assert_eq!(tg.dims, (1, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                // gather the cube by hand
                let mut cube = Vec::new();
                for r in 0..2 {
                    for c in 0..2 {
                        for ch in 0..2 {
                            cube.push(x.data()[(ch * 4 + 2 * i + r) * 4 + 2 * j + c]);
                        }
                    }
                }
                for d in 0..3 {
                    let mut acc = b.data()[d];
                    for (k, v) in cube.iter().enumerate() {
                        acc += v * w.data()[k * 3 + d];
                    }
                    let got = tg.data.data()[(i * 2 + j) * 3 + d];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn embed_is_linear_without_bias() {
        let x = random_batch(&[1, 2, 2, 4, 4], 4);
        let patch = PatchSize::square(2);
        let mut rng = rng_for(5, "w");
        let w = Tensor::from_fn(&[8, 6], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::zeros(&[6]);
        let e1 = embed(&ReflectanceBatch::new(x.clone(), None).unwrap(), &w, &b, patch).unwrap();
        let e2 = embed(&ReflectanceBatch::new(x.scale(2.5), None).unwrap(), &w, &b, patch).unwrap();
        assert!(e2.data.max_abs_diff(&e1.data.scale(2.5)) < 1e-12);
    }

    fn grid(b: usize, l: usize, d: usize) -> TokenGrid {
        TokenGrid {
            data: Tensor::from_fn(&[b, l, d], |i| i as f64),
            dims: (1, 1, l),
            patch: (1, 1, 1),
        }
    }

    #[test]
    fn masking_ratio_zero_keeps_everything() {
        let g = grid(2, 6, 3);
        let (vis, plan) = random_masking(&g, 0.0, &mut rng_for(0, "m")).unwrap();
        assert_eq!(plan.keep_count, 6);
        assert!(plan.mask.iter().flatten().all(|&m| !m));
        assert_eq!(vis.shape(), &[2, 6, 3]);
        assert!(random_masking(&g, 1.0, &mut rng_for(0, "m")).is_err());
    }

    #[test]
    fn keep_count_for_standard_grid() {
        let plan = MaskPlan::random(1, 784, 0.75, &mut rng_for(0, "m")).unwrap();
        assert_eq!(plan.keep_count, 196);
        assert_eq!(plan.mask[0].iter().filter(|&&m| !m).count(), 196);
    }

    #[test]
    fn restore_reproduces_original_order() {
        let g = grid(1, 8, 2);
        let (vis, plan) = random_masking(&g, 0.5, &mut rng_for(11, "m")).unwrap();
        // visible ‖ placeholders, then unshuffle through `restore`
        let mut full: Vec<Option<Vec<f64>>> = vis.data().chunks(2).map(|c| Some(c.to_vec())).collect();
        full.extend(std::iter::repeat_n(None, 8 - plan.keep_count));
        for l in 0..8 {
            let slot = &full[plan.restore[0][l]];
            if plan.mask[0][l] {
                assert!(slot.is_none());
            } else {
                assert_eq!(slot.as_deref().unwrap(), &g.data.data()[l * 2..l * 2 + 2]);
            }
        }
        for (k, &l) in plan.shuffle[0].iter().enumerate() {
            assert_eq!(plan.restore[0][l], k);
        }
    }

    #[test]
    fn masking_is_seeded_and_uniform() {
        let g = grid(1, 16, 1);
        let a = random_masking(&g, 0.75, &mut rng_for(3, "m")).unwrap();
        let b = random_masking(&g, 0.75, &mut rng_for(3, "m")).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 16];
        let mut rng = rng_for(4, "m");
        let trials = 10_000;
        for _ in 0..trials {
            let plan = MaskPlan::random(1, 16, 0.75, &mut rng).unwrap();
            for (c, &m) in counts.iter_mut().zip(&plan.mask[0]) {
                *c += m as usize;
            }
        }
        for c in counts {
            let rate = c as f64 / trials as f64;
            assert!((rate - 0.75).abs() <= 0.02, "rate {rate}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn patchify_round_trip(b in 1usize..3, t in 1usize..4, c in 1usize..4, gh in 1usize..4, gw in 1usize..4,
                               ph in 1usize..5, pw in 1usize..5, seed in any::<u64>()) {
            let x = random_batch(&[b, t, c, gh * ph, gw * pw], seed);
            let patch = PatchSize { t: 1, h: ph, w: pw };
            let p = patchify_pixels(&x, patch).unwrap();
            prop_assert_eq!(p.shape(), &[b, t * gh * gw, ph * pw * c]);
            prop_assert_eq!(unpatchify(&p, (t, gh, gw), patch, c).unwrap(), x);
        }
    }
}
