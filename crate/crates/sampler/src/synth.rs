//! Deterministic synthetic catalogs and scene indices for desk-scale runs.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use rand::Rng;

use geomae_core::posenc::AcqDate;
use geomae_core::seed::rng_indexed;

use crate::catalog::{BlockQa, SceneRecord, TileRecord, BARE, WATER};
use crate::error::{invalid, Result};

pub const SYNTH_CLASSES: [&str; 11] = [
    BARE,
    "closed_forest_deciduous",
    "closed_forest_evergreen",
    "cropland",
    "grassland",
    "open_forest",
    "shrubland",
    "snow",
    "urban",
    WATER,
    "wetland",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub tiles: usize,
    /// Monthly scenes per tile, starting in January of `start_year`.
    pub scenes: usize,
    pub start_year: i32,
    pub blocks_per_side: u32,
    pub bands: usize,
    pub ecoregions: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tiles: 2000,
            scenes: 24,
            start_year: 2019,
            blocks_per_side: 2,
            bands: 6,
            ecoregions: 150,
        }
    }
}

fn tile(i: usize, cfg: &SynthConfig, seed: u64) -> TileRecord {
    let mut rng = rng_indexed(seed, "synth-tile", i as u64);
    let kind: f64 = rng.random();
    let mut w: BTreeMap<String, f64> = BTreeMap::new();
    let (main, share) = if kind < 0.08 {
        (WATER, rng.random_range(0.9..=1.0))
    } else if kind < 0.16 {
        (BARE, rng.random_range(0.8..=1.0))
    } else {
        (SYNTH_CLASSES[rng.random_range(0..SYNTH_CLASSES.len())], rng.random_range(0.2..0.95))
    };
    w.insert(main.to_string(), share);
    let others = rng.random_range(0..=4);
    let mut rest = Vec::new();
    for _ in 0..others {
        let c = SYNTH_CLASSES[rng.random_range(0..SYNTH_CLASSES.len())];
        rest.push((c, rng.random_range(0.05..1.0)));
    }
    let total: f64 = rest.iter().map(|(_, x)| x).sum();
    if total > 0.0 {
        for (c, x) in rest {
            *w.entry(c.to_string()).or_default() += (1.0 - share) * x / total;
        }
    } else {
        w.insert(main.to_string(), 1.0);
    }
    // Renormalise so the fractions sum to 1 within rounding.
    let s: f64 = w.values().sum();
    w.values_mut().for_each(|x| *x /= s);
    // A skewed draw leaves the high ids rare, some below the coverage floor.
    let n_eco = rng.random_range(1..=2);
    let ecoregions = (0..n_eco)
        .map(|_| (cfg.ecoregions as f64 * rng.random::<f64>().powi(2)) as u32)
        .collect();
    TileRecord {
        tile_id: format!("S{i:05}"),
        urban_frac: w.get("urban").copied().unwrap_or(0.0),
        class_props: w,
        ecoregions,
        lat: rng.random_range(-56.0..72.0),
        lon: rng.random_range(-180.0..180.0),
    }
}

fn scenes_for(t: &TileRecord, i: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SceneRecord>> {
    let mut rng = rng_indexed(seed, "synth-scenes", i as u64);
    let sea = t.prop(WATER) >= 0.9;
    let mut out = Vec::with_capacity(cfg.scenes);
    for k in 0..cfg.scenes {
        let year = cfg.start_year + (k / 12) as i32;
        let day = NaiveDate::from_ymd_opt(year, (k % 12) as u32 + 1, rng.random_range(1..=28))
            .ok_or_else(|| invalid!("bad synthetic date"))?;
        let date = AcqDate::new(year, day.ordinal() as u16).map_err(|e| invalid!("{e}"))?;
        let mut blocks = BTreeMap::new();
        for r in 0..cfg.blocks_per_side {
            for c in 0..cfg.blocks_per_side {
                let u: f64 = rng.random();
                let cloud_frac = if u < 0.65 {
                    rng.random_range(0.0..0.15)
                } else if u < 0.85 {
                    rng.random_range(0.1..0.3)
                } else {
                    rng.random_range(0.3..=1.0)
                };
                // The top-left block of a sea tile is coastline; the rest is
                // open water.
                let water_frac = if sea && (r, c) != (0, 0) {
                    1.0
                } else {
                    (t.prop(WATER) * rng.random_range(0.5..1.5)).min(1.0)
                };
                let gappy = rng.random_bool(0.08);
                let missing_frac = (0..cfg.bands)
                    .map(|_| if gappy { rng.random_range(0.0..0.05) } else { 0.0 })
                    .collect();
                blocks.insert(
                    (r, c),
                    BlockQa {
                        cloud_frac,
                        water_frac,
                        missing_frac,
                    },
                );
            }
        }
        out.push(SceneRecord {
            tile_id: t.tile_id.clone(),
            date,
            blocks,
        });
    }
    Ok(out)
}

pub fn synth_catalog(cfg: &SynthConfig, seed: u64) -> Result<(Vec<TileRecord>, Vec<SceneRecord>)> {
    if cfg.tiles == 0 || cfg.blocks_per_side == 0 || cfg.bands == 0 || cfg.ecoregions == 0 {
        return Err(invalid!("synthetic catalog needs tiles, blocks, bands and ecoregions"));
    }
    let mut tiles = Vec::with_capacity(cfg.tiles);
    let mut scenes = Vec::with_capacity(cfg.tiles * cfg.scenes);
    for i in 0..cfg.tiles {
        let t = tile(i, cfg, seed);
        t.validate()?;
        scenes.extend(scenes_for(&t, i, cfg, seed)?);
        tiles.push(t);
    }
    Ok((tiles, scenes))
}
