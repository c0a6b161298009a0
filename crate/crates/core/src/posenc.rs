//! Sinusoidal positional encodings and the geotemporal metadata bias.
//!
//! The 1D layout puts all sines first and all cosines second:
//! `row(p) = [sin(p·ω_0) .. sin(p·ω_{n-1}), cos(p·ω_0) .. cos(p·ω_{n-1})]`
//! with `ω_k = 10000^(-2k/dim)` and `n = dim / 2`.
//!
//! The 3D table concatenates the 1D encodings of the token's
//! `(t, row, col)` coordinates over a `(Dt, Dh, Dw)` channel split. Location
//! and date encodings concatenate two half-width 1D encodings evaluated at
//! raw coordinate values (degrees, calendar year, day of year).

use rand::Rng;

use crate::error::{invalid, Result};
use crate::patchify::TokenGrid;
use crate::tensor::Tensor;

/// 1D sin/cos table, `[positions.len(), dim]`.
pub fn sincos_1d(positions: &[f64], dim: usize) -> Result<Tensor> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(invalid!("sin/cos dimension must be even and >= 2, got {dim}"));
    }
    let mut out = Tensor::zeros(&[positions.len(), dim]);
    for (row, &p) in out.data_mut().chunks_mut(dim).zip(positions) {
        encode_into(p, row);
    }
    Ok(out)
}

fn encode_into(p: f64, row: &mut [f64]) {
    let dim = row.len();
    let half = dim / 2;
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let (s, c) = (p * omega).sin_cos();
        row[k] = s;
        row[half + k] = c;
    }
}

fn encode_vec(p: f64, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    encode_into(p, &mut v);
    v
}

/// Channel allocation of a 3D table over the time, row and column axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelSplit {
    pub time: usize,
    pub height: usize,
    pub width: usize,
}

impl ChannelSplit {
    pub fn new(time: usize, height: usize, width: usize) -> Result<Self> {
        for (axis, d) in [("time", time), ("height", height), ("width", width)] {
            if d < 2 || d % 2 != 0 {
                return Err(invalid!("{axis} channels must be even and >= 2, got {d}"));
            }
        }
        Ok(ChannelSplit {
            time,
            height,
            width,
        })
    }

    /// `Dt` = nearest even number to `D/4`; the rest is shared by the two
    /// spatial axes. When the remainder halves to an odd number the height
    /// axis takes one extra pair member (`D = 8` gives `(2, 4, 2)`).
    pub fn default_for(dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(invalid!("embedding dimension must be even, got {dim}"));
        }
        let time = 2 * ((dim as f64 / 8.0).round() as usize);
        let rest = dim.saturating_sub(time);
        let (height, width) = if (rest / 2).is_multiple_of(2) {
            (rest / 2, rest / 2)
        } else {
            (rest / 2 + 1, rest / 2 - 1)
        };
        Self::new(time, height, width)
    }

    pub fn total(&self) -> usize {
        self.time + self.height + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosTable3D {
    values: Tensor,
    dims: (usize, usize, usize),
    split: ChannelSplit,
}

impl PosTable3D {
    /// `[L, D]` with row `l = t·Gh·Gw + i·Gw + j`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn split(&self) -> ChannelSplit {
        self.split
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let d = self.split.total();
        &self.values.data()[l * d..(l + 1) * d]
    }
}

pub fn sincos_3d(t: usize, gh: usize, gw: usize, dim: usize) -> Result<PosTable3D> {
    sincos_3d_with_split(t, gh, gw, ChannelSplit::default_for(dim)?)
}

pub fn sincos_3d_with_split(
    t: usize,
    gh: usize,
    gw: usize,
    split: ChannelSplit,
) -> Result<PosTable3D> {
    let d = split.total();
    let l = t * gh * gw;
    let time = sincos_1d(&(0..t).map(|v| v as f64).collect::<Vec<_>>(), split.time)?;
    let rows = sincos_1d(&(0..gh).map(|v| v as f64).collect::<Vec<_>>(), split.height)?;
    let cols = sincos_1d(&(0..gw).map(|v| v as f64).collect::<Vec<_>>(), split.width)?;
    let mut values = Tensor::zeros(&[l, d]);
    let chunk = |tab: &Tensor, i: usize, w: usize| -> Vec<f64> { tab.data()[i * w..(i + 1) * w].to_vec() };
    for ti in 0..t {
        for i in 0..gh {
            for j in 0..gw {
                let li = (ti * gh + i) * gw + j;
                let dst = &mut values.data_mut()[li * d..(li + 1) * d];
                dst[..split.time].copy_from_slice(&chunk(&time, ti, split.time));
                dst[split.time..split.time + split.height].copy_from_slice(&chunk(&rows, i, split.height));
                dst[split.time + split.height..].copy_from_slice(&chunk(&cols, j, split.width));
            }
        }
    }
    Ok(PosTable3D {
        values,
        dims: (t, gh, gw),
        split,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AcqDate {
    pub year: i32,
    pub doy: u16,
}

impl AcqDate {
    pub fn new(year: i32, doy: u16) -> Result<Self> {
        if !(1..=366).contains(&doy) {
            return Err(invalid!("day of year {doy} outside [1, 366]"));
        }
        Ok(AcqDate { year, doy })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoTemporalMetadata {
    pub lat: f64,
    pub lon: f64,
    pub dates: Vec<AcqDate>,
}

impl GeoTemporalMetadata {
    pub fn validate(&self, frames: usize) -> Result<()> {
        check_lat_lon(self.lat, self.lon)?;
        if self.dates.len() != frames {
            return Err(invalid!(
                "metadata carries {} dates for {frames} frames",
                self.dates.len()
            ));
        }
        for d in &self.dates {
            AcqDate::new(d.year, d.doy)?;
        }
        Ok(())
    }
}

fn check_lat_lon(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(invalid!("latitude {lat} outside [-90, 90]"));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(invalid!("longitude {lon} outside [-180, 180]"));
    }
    Ok(())
}

fn check_quarter(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(invalid!("metadata encoding width must be a positive multiple of 4, got {dim}"));
    }
    Ok(())
}

/// `sincos(lat, D/2) ‖ sincos(lon, D/2)`.
pub fn encode_location(lat: f64, lon: f64, dim: usize) -> Result<Vec<f64>> {
    check_quarter(dim)?;
    check_lat_lon(lat, lon)?;
    let mut v = encode_vec(lat, dim / 2);
    v.extend(encode_vec(lon, dim / 2));
    Ok(v)
}

/// `sincos(year, D/2) ‖ sincos(doy, D/2)`.
pub fn encode_date(date: AcqDate, dim: usize) -> Result<Vec<f64>> {
    check_quarter(dim)?;
    let date = AcqDate::new(date.year, date.doy)?;
    let mut v = encode_vec(date.year as f64, dim / 2);
    v.extend(encode_vec(date.doy as f64, dim / 2));
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetadataBiasParams {
    pub w_time: f64,
    pub w_loc: f64,
    pub drop_prob: f64,
}

impl Default for MetadataBiasParams {
    fn default() -> Self {
        MetadataBiasParams {
            w_time: 1.0,
            w_loc: 1.0,
            drop_prob: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub time: bool,
    pub loc: bool,
}

impl DropFlags {
    pub const KEEP: DropFlags = DropFlags {
        time: false,
        loc: false,
    };
    pub const ALL: DropFlags = DropFlags {
        time: true,
        loc: true,
    };
}

/// Two independent Bernoulli(`drop_prob`) draws: time first, then location.
pub fn sample_drop_flags(drop_prob: f64, rng: &mut impl Rng) -> Result<DropFlags> {
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(invalid!("drop probability {drop_prob} outside [0, 1]"));
    }
    let time = rng.random::<f64>() < drop_prob;
    let loc = rng.random::<f64>() < drop_prob;
    Ok(DropFlags { time, loc })
}

/// Per-token additive terms for a batch, expanded to `[B, L, D]`.
///
/// Returns `None` for a term when every sample drops it; dropped samples in
/// a mixed batch get zero rows.
pub struct BiasTerms {
    pub time: Option<Tensor>,
    pub loc: Option<Tensor>,
}

pub fn bias_terms(
    meta: &[GeoTemporalMetadata],
    dims: (usize, usize, usize),
    dim: usize,
    drops: &[DropFlags],
) -> Result<BiasTerms> {
    let (t, gh, gw) = dims;
    if meta.len() != drops.len() {
        return Err(invalid!("{} metadata records for {} drop flags", meta.len(), drops.len()));
    }
    let b = meta.len();
    let per_frame = gh * gw;
    let l = t * per_frame;
    let mut time = drops.iter().any(|d| !d.time).then(|| Tensor::zeros(&[b, l, dim]));
    let mut loc = drops.iter().any(|d| !d.loc).then(|| Tensor::zeros(&[b, l, dim]));
    for (bi, (m, d)) in meta.iter().zip(drops).enumerate() {
        m.validate(t)?;
        if let (Some(tt), false) = (time.as_mut(), d.time) {
            for (ti, date) in m.dates.iter().enumerate() {
                let enc = encode_date(*date, dim)?;
                for p in 0..per_frame {
                    let row = (bi * l + ti * per_frame + p) * dim;
                    tt.data_mut()[row..row + dim].copy_from_slice(&enc);
                }
            }
        }
        if let (Some(lt), false) = (loc.as_mut(), d.loc) {
            let enc = encode_location(m.lat, m.lon, dim)?;
            for p in 0..l {
                let row = (bi * l + p) * dim;
                lt.data_mut()[row..row + dim].copy_from_slice(&enc);
            }
        }
    }
    Ok(BiasTerms { time, loc })
}

/// `tokens + w_time·date(t) + w_loc·location` for each sample, omitting a
/// term where its drop flag is set.
pub fn apply_metadata_bias(
    tokens: &TokenGrid,
    meta: &[GeoTemporalMetadata],
    params: &MetadataBiasParams,
    drops: &[DropFlags],
) -> Result<TokenGrid> {
    let shape = tokens.data.shape();
    if meta.len() != shape[0] {
        return Err(invalid!("{} metadata records for batch of {}", meta.len(), shape[0]));
    }
    let terms = bias_terms(meta, tokens.dims, shape[2], drops)?;
    let mut out = tokens.clone();
    for (term, w) in [(terms.time, params.w_time), (terms.loc, params.w_loc)] {
        if let Some(term) = term {
            for (o, v) in out.data.data_mut().iter_mut().zip(term.data()) {
                *o += v * w;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sincos_1d_examples() {
        assert_eq!(sincos_1d(&[0.0], 4).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let r = sincos_1d(&[1.0], 4).unwrap();
        let expect = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        assert!(close(r.data(), &expect, 1e-15));
        assert!(close(r.data(), &[0.84147, 0.01000, 0.54030, 0.99995], 1e-5));
        let r = sincos_1d(&[2.0], 2).unwrap();
        assert!(close(r.data(), &[2f64.sin(), 2f64.cos()], 1e-15));
        assert!(sincos_1d(&[0.0], 3).is_err());
    }

    #[test]
    fn default_split() {
        assert_eq!(ChannelSplit::default_for(8).unwrap(), ChannelSplit::new(2, 4, 2).unwrap());
        assert_eq!(ChannelSplit::default_for(16).unwrap(), ChannelSplit::new(4, 6, 6).unwrap());
        assert_eq!(ChannelSplit::default_for(1024).unwrap(), ChannelSplit::new(256, 384, 384).unwrap());
        assert_eq!(ChannelSplit::default_for(1280).unwrap(), ChannelSplit::new(320, 480, 480).unwrap());
        assert!(ChannelSplit::default_for(4).is_err());
        assert!(ChannelSplit::default_for(7).is_err());
        assert!(ChannelSplit::new(2, 3, 3).is_err());
    }

    #[test]
    fn sincos_3d_single_token() {
        let t = sincos_3d(1, 1, 1, 8).unwrap();
        assert_eq!(t.values().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sincos_3d_canonical_order() {
        let t = sincos_3d(2, 2, 2, 8).unwrap();
        assert_eq!(t.values().shape(), &[8, 8]);
        // l = 5 -> (t=1, i=0, j=1)
        let mut expect = sincos_1d(&[1.0], 2).unwrap().into_data();
        expect.extend(sincos_1d(&[0.0], 4).unwrap().into_data());
        expect.extend(sincos_1d(&[1.0], 2).unwrap().into_data());
        assert_eq!(t.row(5), &expect[..]);
    }

    /// Brute-force reconstruction of every row from its decoded coordinates.
    fn reconstruct_all(t: usize, gh: usize, gw: usize, d: usize) {
        let tab = sincos_3d(t, gh, gw, d).unwrap();
        let s = tab.split();
        assert_eq!(tab.values().shape(), &[t * gh * gw, d]);
        for l in 0..t * gh * gw {
            let (ti, i, j) = (l / (gh * gw), (l / gw) % gh, l % gw);
            let mut row = Vec::new();
            for (p, w) in [(ti, s.time), (i, s.height), (j, s.width)] {
                let half = w / 2;
                let mut v = vec![0.0; w];
                for k in 0..half {
                    let a = p as f64 / 10000f64.powf(2.0 * k as f64 / w as f64);
                    v[k] = a.sin();
                    v[half + k] = a.cos();
                }
                row.extend(v);
            }
            assert!(close(tab.row(l), &row, 1e-12), "row {l}");
        }
    }

    #[test]
    fn sincos_3d_reconstruction() {
        reconstruct_all(4, 14, 14, 16);
        for (t, gh, gw) in [(1, 1, 1), (2, 3, 5), (4, 8, 8)] {
            for d in [8, 12, 16, 24] {
                reconstruct_all(t, gh, gw, d);
            }
        }
    }

    #[test]
    fn location_and_date_examples() {
        assert_eq!(encode_location(0.0, 0.0, 8).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let v = encode_location(45.0, -120.0, 4).unwrap();
        let e = [45f64.sin(), 45f64.cos(), (-120f64).sin(), (-120f64).cos()];
        assert!(close(&v, &e, 1e-15));
        assert!(encode_location(90.5, 0.0, 8).is_err());
        assert!(encode_location(0.0, 180.5, 8).is_err());
        assert!(encode_location(0.0, 0.0, 6).is_err());

        let v = encode_date(AcqDate { year: 2020, doy: 1 }, 4).unwrap();
        let e = [2020f64.sin(), 2020f64.cos(), 1f64.sin(), 1f64.cos()];
        assert!(close(&v, &e, 1e-15));
        let a = encode_date(AcqDate { year: 2019, doy: 200 }, 16).unwrap();
        let b = encode_date(AcqDate { year: 2019, doy: 200 }, 16).unwrap();
        assert_eq!(a, b);
        assert!(encode_date(AcqDate { year: 2019, doy: 400 }, 8).is_err());
        assert!(encode_date(AcqDate { year: 2019, doy: 0 }, 8).is_err());
        assert!(encode_date(AcqDate { year: 2020, doy: 366 }, 8).is_ok());
    }

    fn grid(b: usize, dims: (usize, usize, usize), d: usize, seed: u64) -> TokenGrid {
        let mut rng = rng_for(seed, "grid");
        let l = dims.0 * dims.1 * dims.2;
        TokenGrid {
            data: Tensor::from_fn(&[b, l, d], |_| rng.random_range(-1.0..1.0)),
            dims,
            patch: (1, 16, 16),
        }
    }

    fn meta(t: usize) -> GeoTemporalMetadata {
        GeoTemporalMetadata {
            lat: 37.5,
            lon: -122.25,
            dates: (0..t).map(|i| AcqDate { year: 2019, doy: 30 + 40 * i as u16 }).collect(),
        }
    }

    #[test]
    fn metadata_bias_examples() {
        let g = grid(1, (2, 2, 2), 8, 1);
        let m = [meta(2)];
        let p = MetadataBiasParams::default();
        assert_eq!(apply_metadata_bias(&g, &m, &p, &[DropFlags::ALL]).unwrap(), g);
        let zero = MetadataBiasParams { w_time: 0.0, w_loc: 0.0, drop_prob: 0.1 };
        assert_eq!(apply_metadata_bias(&g, &m, &zero, &[DropFlags::KEEP]).unwrap().data, g.data);

        let single = grid(1, (1, 1, 1), 8, 2);
        let p = MetadataBiasParams { w_time: 0.3, w_loc: 1.0, drop_prob: 0.1 };
        let out = apply_metadata_bias(&single, &[meta(1)], &p, &[DropFlags { time: true, loc: false }]).unwrap();
        let enc = encode_location(37.5, -122.25, 8).unwrap();
        let expect: Vec<f64> = single.data.data().iter().zip(&enc).map(|(a, b)| a + b).collect();
        assert_eq!(out.data.data(), &expect[..]);

        assert!(apply_metadata_bias(&g, &[meta(3)], &p, &[DropFlags::KEEP]).is_err());
        assert!(apply_metadata_bias(&grid(1, (2, 2, 2), 6, 1), &m, &p, &[DropFlags::KEEP]).is_err());
    }

    #[test]
    fn metadata_bias_is_per_frame() {
        let g = grid(1, (2, 1, 2), 8, 3);
        let m = [meta(2)];
        let p = MetadataBiasParams { w_time: 1.0, w_loc: 0.0, drop_prob: 0.0 };
        let out = apply_metadata_bias(&g, &m, &p, &[DropFlags::KEEP]).unwrap();
        for l in 0..4 {
            let frame = l / 2;
            let enc = encode_date(m[0].dates[frame], 8).unwrap();
            for c in 0..8 {
                let i = l * 8 + c;
                assert_eq!(out.data.data()[i], g.data.data()[i] + enc[c]);
            }
        }
    }

    #[test]
    fn metadata_bias_linear_in_weights() {
        let g = grid(2, (2, 2, 3), 16, 4);
        let m = [meta(2), GeoTemporalMetadata { lat: -12.0, lon: 150.0, ..meta(2) }];
        let full = MetadataBiasParams { w_time: 0.7, w_loc: -1.3, drop_prob: 0.1 };
        let half = MetadataBiasParams { w_time: 0.35, w_loc: -0.65, drop_prob: 0.1 };
        let drops = [DropFlags::KEEP, DropFlags { time: false, loc: true }];
        let once = apply_metadata_bias(&g, &m, &full, &drops).unwrap();
        let twice = apply_metadata_bias(&apply_metadata_bias(&g, &m, &half, &drops).unwrap(), &m, &half, &drops).unwrap();
        assert!(once.data.max_abs_diff(&twice.data) < 1e-12);
    }

    #[test]
    fn drop_flags_degenerate_probabilities() {
        let mut rng = rng_for(0, "drop");
        for _ in 0..1000 {
            assert_eq!(sample_drop_flags(0.0, &mut rng).unwrap(), DropFlags::KEEP);
            assert_eq!(sample_drop_flags(1.0, &mut rng).unwrap(), DropFlags::ALL);
        }
        assert!(sample_drop_flags(1.5, &mut rng).is_err());
    }

    #[test]
    fn drop_flags_rate_and_independence() {
        let mut rng = rng_for(42, "drop");
        let n = 100_000;
        let draws: Vec<DropFlags> = (0..n).map(|_| sample_drop_flags(0.1, &mut rng).unwrap()).collect();
        let t: Vec<f64> = draws.iter().map(|d| d.time as u8 as f64).collect();
        let l: Vec<f64> = draws.iter().map(|d| d.loc as u8 as f64).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let (mt, ml) = (mean(&t), mean(&l));
        assert!((mt - 0.1).abs() <= 0.01 && (ml - 0.1).abs() <= 0.01);
        let cov = t.iter().zip(&l).map(|(a, b)| (a - mt) * (b - ml)).sum::<f64>() / n as f64;
        let corr = cov / (mt * (1.0 - mt) * ml * (1.0 - ml)).sqrt();
        assert!(corr.abs() < 0.02, "corr {corr}");
    }

    proptest! {
        #[test]
        fn sincos_values_bounded(p in -1e4f64..1e4, half in 1usize..16) {
            let r = sincos_1d(&[p], 2 * half).unwrap();
            prop_assert!(r.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn sincos_deterministic(ps in proptest::collection::vec(-500f64..500.0, 1..8)) {
            prop_assert_eq!(sincos_1d(&ps, 10).unwrap(), sincos_1d(&ps, 10).unwrap());
        }
    }
}
