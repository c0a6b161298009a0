//! End-to-end dataset construction from a catalog and a scene index.
//!
//! Order of stages: tile selection, per-tile sequences, QA filtering,
//! homogeneous subsampling, per-area capping. Tiles are processed one at a
//! time with their own named random streams, so the result does not depend
//! on processing order; a final cross-tile cap and dedup pass runs last.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use geomae_core::seed::rng_for;

use crate::catalog::{merge_forest_classes, SceneRecord, TileRecord, BARE};
use crate::error::{invalid, Error, Result};
use crate::patches::{cap_and_dedup, filter_patch, is_full_sea, subsample_homogeneous, write_patches, AreaId, PatchRecord, Reject, Split, Verdict};
use crate::select::{select_tiles, Selection, SelectionConfig};
use crate::sequences::{build_sequences, SequenceCaps};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub selection: SelectionConfig,
    pub sequence_caps: SequenceCaps,
    pub max_train_per_area: usize,
    pub max_val_per_area: usize,
    pub homogeneous_rate: f64,
    /// Tiles with at least this bare-ground fraction count as desert.
    pub desert_bare_frac: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            selection: SelectionConfig::default(),
            sequence_caps: SequenceCaps::default(),
            max_train_per_area: 10,
            max_val_per_area: 2,
            homogeneous_rate: 0.1,
            desert_bare_frac: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageCounts {
    pub candidates: usize,
    pub rejected_missing: usize,
    pub rejected_cloud: usize,
    pub dropped_homogeneous: usize,
    pub dropped_cap: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub selection: Selection,
    /// Sequences drawn per selected tile, before any patch filtering.
    pub sequences: BTreeMap<String, usize>,
    pub records: Vec<PatchRecord>,
    pub counts: StageCounts,
}

impl Dataset {
    pub fn split_of(&self, tile: &str) -> Split {
        if self.selection.is_val(tile) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

pub fn build_dataset(catalog: &[TileRecord], scenes: &[SceneRecord], cfg: &PipelineConfig, seed: u64) -> Result<Dataset> {
    let catalog: Vec<TileRecord> = catalog
        .iter()
        .map(|t| TileRecord {
            class_props: merge_forest_classes(&t.class_props),
            ..t.clone()
        })
        .collect();
    let selection = select_tiles(&catalog, &cfg.selection, &mut rng_for(seed, "select"))?;
    let tiles: BTreeMap<&str, &TileRecord> = catalog.iter().map(|t| (t.tile_id.as_str(), t)).collect();

    let mut by_tile: BTreeMap<&str, Vec<&SceneRecord>> = BTreeMap::new();
    for s in scenes {
        if !tiles.contains_key(s.tile_id.as_str()) {
            return Err(invalid!("scene for tile {:?}, which is not in the catalog", s.tile_id));
        }
        by_tile.entry(&s.tile_id).or_default().push(s);
    }
    let desert: BTreeSet<String> = catalog
        .iter()
        .filter(|t| t.prop(BARE) >= cfg.desert_bare_frac)
        .map(|t| t.tile_id.clone())
        .collect();

    let mut counts = StageCounts::default();
    let mut sequences = BTreeMap::new();
    let mut records = Vec::new();
    let selected = selection.train.iter().map(|t| (t, Split::Train)).chain(selection.val.iter().map(|t| (t, Split::Val)));
    let mut selected: Vec<_> = selected.collect();
    selected.sort();
    for (tile, split) in selected {
        let mut tile_scenes = by_tile.get(tile.as_str()).cloned().unwrap_or_default();
        tile_scenes.sort_by_key(|s| s.date);
        let dates: Vec<_> = tile_scenes.iter().map(|s| s.date).collect();
        let cap = cfg.sequence_caps.for_split(split == Split::Val);
        let seqs = build_sequences(&dates, cap, &mut rng_for(seed, &format!("sequences/{tile}")));
        sequences.insert(tile.clone(), seqs.len());
        let blocks: BTreeSet<_> = tile_scenes.iter().flat_map(|s| s.blocks.keys().copied()).collect();

        let mut accepted = Vec::new();
        for seq in &seqs {
            for &(row, col) in &blocks {
                let qa = seq
                    .iter()
                    .map(|&i| tile_scenes[i].blocks.get(&(row, col)).cloned())
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| invalid!("tile {tile}: block ({row}, {col}) lacks QA in some scene"))?;
                let rec = PatchRecord {
                    area: AreaId {
                        tile_id: tile.clone(),
                        row,
                        col,
                    },
                    dates: seq.iter().map(|&i| dates[i]).collect(),
                    qa,
                    split,
                };
                counts.candidates += 1;
                match filter_patch(&rec)? {
                    Verdict::Accept => accepted.push(rec),
                    Verdict::Reject(Reject::Missing) => counts.rejected_missing += 1,
                    Verdict::Reject(Reject::Cloud) => counts.rejected_cloud += 1,
                }
            }
        }
        let n = accepted.len();
        let sea: Vec<bool> = accepted.iter().map(is_full_sea).collect();
        let kept = subsample_homogeneous(
            accepted,
            &sea,
            &desert,
            cfg.homogeneous_rate,
            &mut rng_for(seed, &format!("homogeneous/{tile}")),
        )?;
        counts.dropped_homogeneous += n - kept.len();
        let n = kept.len();
        let capped = cap_and_dedup(
            kept,
            cfg.max_train_per_area,
            cfg.max_val_per_area,
            &mut rng_for(seed, &format!("cap/{tile}")),
        );
        counts.dropped_cap += n - capped.len();
        records.extend(capped);
    }
    // Areas are tile-local here, so this pass only matters for inputs whose
    // areas span tiles; it is kept as the single reduction step.
    let n = records.len();
    let records = cap_and_dedup(records, cfg.max_train_per_area, cfg.max_val_per_area, &mut rng_for(seed, "cap/all"));
    counts.dropped_cap += n - records.len();
    log::info!(
        "{} tiles selected, {} candidates, {} records kept",
        sequences.len(),
        counts.candidates,
        records.len()
    );
    Ok(Dataset {
        selection,
        sequences,
        records,
        counts,
    })
}

/// Per-class share of land cover over the whole catalog and over the
/// selected tiles, weighted by the number of records on each tile.
pub fn class_shares(catalog: &[TileRecord], ds: &Dataset) -> BTreeMap<String, (f64, f64)> {
    let mut per_tile: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &ds.records {
        *per_tile.entry(&r.area.tile_id).or_default() += 1;
    }
    let mut out: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let total = ds.records.len().max(1) as f64;
    for t in catalog {
        let w = per_tile.get(t.tile_id.as_str()).copied().unwrap_or(0) as f64 / total;
        for (class, p) in merge_forest_classes(&t.class_props) {
            let e = out.entry(class).or_default();
            e.0 += p / catalog.len() as f64;
            e.1 += p * w;
        }
    }
    out
}

/// Writes `patches.csv`, `tiles.csv` and `class_shares.csv` into `dir`.
pub fn save_dataset(dir: &Path, catalog: &[TileRecord], ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_patches(&dir.join("patches.csv"), &ds.records)?;
    let fmt = |e: csv::Error| Error::Format {
        what: "dataset summary",
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tile_id", "split", "sequences", "reasons"]).map_err(fmt)?;
    for (tile, n) in &ds.sequences {
        let reasons: Vec<String> = ds.selection.reasons[tile].iter().map(|r| format!("{r:?}")).collect();
        w.write_record([tile.as_str(), &ds.split_of(tile).to_string(), &n.to_string(), &reasons.join(";")])
            .map_err(fmt)?;
    }
    write_csv(&dir.join("tiles.csv"), w)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "catalog_share", "dataset_share"]).map_err(fmt)?;
    for (class, (a, b)) in class_shares(catalog, ds) {
        w.write_record([class, a.to_string(), b.to_string()]).map_err(fmt)?;
    }
    write_csv(&dir.join("class_shares.csv"), w)
}

fn write_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Format {
        what: "dataset summary",
        detail: e.into_error().to_string(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
