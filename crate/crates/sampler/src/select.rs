//! Tile selection: per-class draws from the purest tiles, urban and
//! high-entropy additions, ecoregion coverage, and the tile-level split.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::catalog::TileRecord;
use crate::error::{invalid, Result};

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn lulc_entropy<'a>(props: impl IntoIterator<Item = &'a f64>) -> f64 {
    props
        .into_iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub per_class: usize,
    /// Candidate pool per class: this many tiles with the highest fraction.
    pub pool: usize,
    pub urban: usize,
    pub entropy: usize,
    /// Ecoregions found in at least this many catalog tiles end up in at
    /// least this many selected tiles.
    pub ecoregion_min: usize,
    pub train_frac: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            per_class: 100,
            pool: 500,
            urban: 1000,
            entropy: 1000,
            ecoregion_min: 3,
            train_frac: 0.95,
        }
    }
}

/// Why a tile was picked; a tile may carry several reasons.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reason {
    Class(String),
    Urban,
    Entropy,
    Ecoregion(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub reasons: BTreeMap<String, BTreeSet<Reason>>,
}

impl Selection {
    pub fn is_val(&self, tile: &str) -> bool {
        self.val.iter().any(|t| t == tile)
    }
}

/// The `n` tiles ranked highest by `key`, ties broken by tile id. Tiles
/// where `key` is zero never qualify.
fn top_by(catalog: &[TileRecord], n: usize, key: impl Fn(&TileRecord) -> f64) -> Vec<&TileRecord> {
    let mut v: Vec<(&TileRecord, f64)> = catalog.iter().map(|t| (t, key(t))).filter(|(_, k)| *k > 0.0).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.tile_id.cmp(&b.0.tile_id)));
    v.into_iter().take(n).map(|(t, _)| t).collect()
}

pub fn class_pool<'a>(catalog: &'a [TileRecord], class: &str, pool: usize) -> Vec<&'a TileRecord> {
    top_by(catalog, pool, |t| t.prop(class))
}

pub fn select_tiles(catalog: &[TileRecord], cfg: &SelectionConfig, rng: &mut impl Rng) -> Result<Selection> {
    if catalog.is_empty() {
        return Err(invalid!("cannot select tiles from an empty catalog"));
    }
    if !(0.0..=1.0).contains(&cfg.train_frac) {
        return Err(invalid!("train_frac {} outside [0, 1]", cfg.train_frac));
    }
    let mut reasons: BTreeMap<String, BTreeSet<Reason>> = BTreeMap::new();
    let mut pick = |t: &TileRecord, r: Reason| {
        reasons.entry(t.tile_id.clone()).or_default().insert(r);
    };

    let classes: BTreeSet<&String> = catalog.iter().flat_map(|t| t.class_props.keys()).collect();
    for class in classes {
        let pool = class_pool(catalog, class, cfg.pool);
        for t in pool.choose_multiple(rng, cfg.per_class) {
            pick(t, Reason::Class(class.clone()));
        }
    }
    for t in top_by(catalog, cfg.urban, |t| t.urban_frac) {
        pick(t, Reason::Urban);
    }
    for t in top_by(catalog, cfg.entropy, |t| lulc_entropy(t.class_props.values())) {
        pick(t, Reason::Entropy);
    }

    // Greedy coverage: for each short ecoregion, add the unselected tile
    // that also helps the most other short ecoregions.
    let mut available: BTreeMap<u32, usize> = BTreeMap::new();
    for t in catalog {
        for &e in &t.ecoregions {
            *available.entry(e).or_default() += 1;
        }
    }
    let count_selected = |reasons: &BTreeMap<String, BTreeSet<Reason>>, e: u32| {
        catalog
            .iter()
            .filter(|t| t.ecoregions.contains(&e) && reasons.contains_key(&t.tile_id))
            .count()
    };
    let targets: Vec<u32> = available
        .iter()
        .filter(|(_, &n)| n >= cfg.ecoregion_min && cfg.ecoregion_min > 0)
        .map(|(&e, _)| e)
        .collect();
    let mut have: BTreeMap<u32, usize> = targets.iter().map(|&e| (e, count_selected(&reasons, e))).collect();
    for &e in &targets {
        while have[&e] < cfg.ecoregion_min {
            let best = catalog
                .iter()
                .filter(|t| t.ecoregions.contains(&e) && !reasons.contains_key(&t.tile_id))
                .max_by(|a, b| {
                    let gain = |t: &TileRecord| {
                        t.ecoregions
                            .iter()
                            .filter(|x| have.get(x).is_some_and(|&n| n < cfg.ecoregion_min))
                            .count()
                    };
                    gain(a).cmp(&gain(b)).then_with(|| b.tile_id.cmp(&a.tile_id))
                })
                .expect("ecoregion has enough catalog tiles");
            for x in &best.ecoregions {
                if let Some(n) = have.get_mut(x) {
                    *n += 1;
                }
            }
            reasons.entry(best.tile_id.clone()).or_default().insert(Reason::Ecoregion(e));
        }
    }

    let mut tiles: Vec<String> = reasons.keys().cloned().collect();
    tiles.shuffle(rng);
    let n_train = (tiles.len() as f64 * cfg.train_frac).round() as usize;
    let val = tiles.split_off(n_train);
    tiles.sort();
    let mut val = val;
    val.sort();
    Ok(Selection {
        train: tiles,
        val,
        reasons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use geomae_core::seed::rng_for;

    #[test]
    fn entropy_examples() {
        assert_eq!(lulc_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let k = 7;
        let u = vec![1.0 / k as f64; k];
        assert!((lulc_entropy(&u) - (k as f64).ln()).abs() < 1e-12);
        let e = lulc_entropy(&[0.5, 0.25, 0.25]);
        assert!((e - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((e - 1.0397).abs() < 5e-5);
    }

    #[test]
    fn degenerate_catalog_selects_everything() {
        let catalog: Vec<TileRecord> = (0..5)
            .map(|i| TileRecord {
                tile_id: format!("T{i}"),
                class_props: [("cropland".to_string(), 1.0)].into(),
                ecoregions: BTreeSet::new(),
                urban_frac: 0.0,
                lat: 0.0,
                lon: 0.0,
            })
            .collect();
        let s = select_tiles(&catalog, &SelectionConfig::default(), &mut rng_for(1, "select")).unwrap();
        assert_eq!(s.train.len(), 5);
        assert!(s.val.is_empty());
        assert!(select_tiles(&[], &SelectionConfig::default(), &mut rng_for(1, "select")).is_err());
    }
}
