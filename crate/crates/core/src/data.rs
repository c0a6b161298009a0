//! Chip sources for training: an on-disk manifest or a synthetic generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chip::{read_chip, read_manifest, ChipRecord};
use crate::error::{invalid, Result};
use crate::patchify::ReflectanceBatch;
use crate::posenc::{AcqDate, GeoTemporalMetadata};
use crate::seed::rng_indexed;
use crate::tensor::Tensor;

/// One multi-temporal chip `[T, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chip {
    pub values: Tensor,
    pub meta: Option<GeoTemporalMetadata>,
}

pub trait ChipSource {
    fn len(&self) -> usize;

    fn chip(&self, index: usize) -> Result<Chip>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks chips into a batch. Metadata is kept only if every chip has it.
pub fn stack(chips: &[Chip]) -> Result<ReflectanceBatch> {
    let first = chips.first().ok_or_else(|| invalid!("cannot stack an empty chip list"))?;
    let shape = first.values.shape().to_vec();
    if shape.len() != 4 {
        return Err(invalid!("chips must be [T, C, H, W], got {shape:?}"));
    }
    let mut data = Vec::with_capacity(chips.len() * first.values.len());
    for c in chips {
        if c.values.shape() != shape.as_slice() {
            return Err(invalid!("chip shape {:?} differs from {shape:?}", c.values.shape()));
        }
        data.extend_from_slice(c.values.data());
    }
    let mut full = vec![chips.len()];
    full.extend_from_slice(&shape);
    let meta = chips.iter().map(|c| c.meta.clone()).collect::<Option<Vec<_>>>();
    ReflectanceBatch::new(Tensor::from_vec(&full, data)?, meta)
}

/// Chips listed in a manifest, read from disk on demand.
#[derive(Clone, Debug)]
pub struct ManifestChips {
    pub records: Vec<ChipRecord>,
}

impl ManifestChips {
    pub fn open(path: &std::path::Path) -> Result<Self> {
        Ok(ManifestChips {
            records: read_manifest(path)?,
        })
    }
}

impl ChipSource for ManifestChips {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn chip(&self, index: usize) -> Result<Chip> {
        let r = self
            .records
            .get(index)
            .ok_or_else(|| invalid!("chip {index} out of range"))?;
        let values = read_chip(&r.file)?;
        if values.ndim() != 4 {
            return Err(invalid!("{}: expected [T, C, H, W], got {:?}", r.file.display(), values.shape()));
        }
        if let Some(m) = &r.meta {
            m.validate(values.shape()[0])?;
        }
        Ok(Chip {
            values,
            meta: r.meta.clone(),
        })
    }
}

/// Deterministic synthetic reflectance chips, generated from the chip index.
///
/// Each chip is a grid of square parcels, each assigned one of
/// [`SyntheticChips::CLASSES`] land-cover classes that stays fixed across
/// frames. A class has its own spectral signature and a seasonal swing driven
/// by the acquisition day. Small noise is added per pixel. Dates are monthly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticChips {
    pub count: usize,
    pub frames: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticChips {
    pub const CLASSES: usize = 6;
    /// Parcel edge in pixels.
    pub const PARCEL: usize = 8;

    pub fn new(count: usize, frames: usize, channels: usize, size: usize, seed: u64) -> Self {
        SyntheticChips {
            count,
            frames,
            channels,
            size,
            seed,
        }
    }
}

impl SyntheticChips {
    /// Row-major land-cover class of every pixel of chip `index`.
    pub fn land_cover(&self, index: usize) -> Result<Vec<usize>> {
        Ok(self.layout(index)?.2)
    }

    // The generator continues from the returned rng, so draw order here is
    // part of the output.
    fn layout(&self, index: usize) -> Result<(ChaCha8Rng, GeoTemporalMetadata, Vec<usize>)> {
        if index >= self.count {
            return Err(invalid!("chip {index} out of range"));
        }
        let mut rng = rng_indexed(self.seed, "synthetic-chip", index as u64);
        let lat = rng.random_range(-55.0..70.0);
        let lon = rng.random_range(-180.0..180.0);
        let year = rng.random_range(2018..=2021);
        let start = rng.random_range(1..=360 - 30 * self.frames.min(11) as u16);
        let dates = (0..self.frames)
            .map(|k| AcqDate::new(year, (start as usize + 30 * k).min(365) as u16))
            .collect::<Result<Vec<_>>>()?;
        let s = self.size;
        let parcel = Self::PARCEL.min(s).max(1);
        let per_row = s.div_ceil(parcel);
        let classes: Vec<usize> = (0..per_row * per_row)
            .map(|_| rng.random_range(0..Self::CLASSES))
            .collect();
        let cover = (0..s * s)
            .map(|q| classes[(q / s / parcel) * per_row + (q % s) / parcel])
            .collect();
        Ok((rng, GeoTemporalMetadata { lat, lon, dates }, cover))
    }
}

// A regional seasonal swing shared by every class, plus a class-specific
// signature and a smaller class-specific swing.
fn class_reflectance(class: usize, band: usize, angle: f64) -> f64 {
    let k = class as f64;
    let b = band as f64;
    let level = 0.04 + 0.05 * b * (0.3 + 0.7 * ((class * 3 + band) % 5) as f64 / 4.0) + 0.02 * k;
    let regional = 0.12 * (0.4 + 0.6 * (band % 3) as f64 / 2.0);
    let swing = 0.03 * ((class * 7 + band * 2) % 6) as f64 / 5.0;
    level + regional * angle.sin() + swing * (angle + 0.9 * k).sin()
}

impl ChipSource for SyntheticChips {
    fn len(&self) -> usize {
        self.count
    }

    fn chip(&self, index: usize) -> Result<Chip> {
        let (mut rng, meta, cover) = self.layout(index)?;
        let (t, c, s) = (self.frames, self.channels, self.size);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let mut v = Tensor::zeros(&[t, c, s, s]);
        let data = v.data_mut();
        for (ti, d) in meta.dates.iter().enumerate() {
            let angle = std::f64::consts::TAU * d.doy as f64 / 365.0;
            for ch in 0..c {
                let band: Vec<f64> = (0..Self::CLASSES).map(|k| class_reflectance(k, ch, angle)).collect();
                let plane = &mut data[(ti * c + ch) * s * s..][..s * s];
                for (px, &k) in plane.iter_mut().zip(&cover) {
                    *px = band[k] + noise.sample(&mut rng);
                }
            }
        }
        Ok(Chip {
            values: v,
            meta: Some(meta),
        })
    }
}

/// Borrowed window over another source.
pub struct Subset<'a, S: ChipSource + ?Sized> {
    pub inner: &'a S,
    pub indices: Vec<usize>,
}

impl<S: ChipSource + ?Sized> ChipSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn chip(&self, index: usize) -> Result<Chip> {
        let i = *self
            .indices
            .get(index)
            .ok_or_else(|| invalid!("chip {index} out of range"))?;
        self.inner.chip(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_chips_are_reproducible_and_valid() {
        let src = SyntheticChips::new(10, 4, 6, 16, 3);
        let a = src.chip(7).unwrap();
        assert_eq!(a, src.chip(7).unwrap());
        assert_ne!(a.values, src.chip(6).unwrap().values);
        assert_eq!(a.values.shape(), &[4, 6, 16, 16]);
        a.meta.as_ref().unwrap().validate(4).unwrap();
        assert!(src.chip(10).is_err());
        let b = stack(&[a.clone(), src.chip(1).unwrap()]).unwrap();
        assert_eq!(b.dims(), (2, 4, 6, 16, 16));
        assert!(b.meta.is_some());
        let mut bare = a.clone();
        bare.meta = None;
        assert!(stack(&[a, bare]).unwrap().meta.is_none());
    }
}
