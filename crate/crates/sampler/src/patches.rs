//! Patch records: QA filtering, gap filling, per-area capping and the
//! down-weighting of homogeneous sea and desert patches.
//!
//! Patch manifest CSV columns:
//! `tile_id,row,col,split,dates,cloud_frac,missing_frac`. `dates` and
//! `cloud_frac` hold one value per timestamp separated by `;`.
//! `missing_frac` holds per-timestamp groups separated by `|`, each a
//! `;`-separated list of per-band fractions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use geomae_core::chip::{format_date, parse_date};
use geomae_core::posenc::AcqDate;

use crate::catalog::BlockQa;
use crate::error::{invalid, Error, Result};
use crate::sequences::SEQ_LEN;

pub const MAX_MISSING: f64 = 0.01;
pub const MAX_CLOUD: f64 = 0.20;
/// Block edge in pixels.
pub const BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(invalid!("unknown split {s:?}")),
        }
    }
}

/// A non-overlapping block of a tile.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AreaId {
    pub tile_id: String,
    pub row: u32,
    pub col: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub area: AreaId,
    pub dates: Vec<AcqDate>,
    /// QA of this block in each of the scenes, aligned with `dates`.
    pub qa: Vec<BlockQa>,
    pub split: Split,
}

impl PatchRecord {
    pub fn cloud_frac(&self) -> impl Iterator<Item = f64> + '_ {
        self.qa.iter().map(|q| q.cloud_frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reject {
    Missing,
    Cloud,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(Reject),
}

/// Missing data is checked before clouds, so a patch failing both is
/// reported as missing.
pub fn filter_patch(p: &PatchRecord) -> Result<Verdict> {
    if p.qa.len() != SEQ_LEN || p.dates.len() != SEQ_LEN {
        return Err(invalid!(
            "patch {:?}: QA for {} of {SEQ_LEN} timestamps",
            p.area,
            p.qa.len().min(p.dates.len())
        ));
    }
    let bands = p.qa[0].missing_frac.len();
    if bands == 0 || p.qa.iter().any(|q| q.missing_frac.len() != bands) {
        return Err(invalid!("patch {:?}: per-band missing fractions absent or ragged", p.area));
    }
    if p.qa.iter().flat_map(|q| &q.missing_frac).any(|&m| m > MAX_MISSING) {
        return Ok(Verdict::Reject(Reject::Missing));
    }
    if p.cloud_frac().any(|c| c > MAX_CLOUD) {
        return Ok(Verdict::Reject(Reject::Cloud));
    }
    Ok(Verdict::Accept)
}

/// Replaces every pixel flagged in `missing` by the value of its nearest
/// valid pixel on an `h × w` row-major grid.
///
/// Distance is Chebyshev; among equally near candidates the first in
/// row-major order wins. A grid with no valid pixel is left unchanged.
pub fn fill_nearest(values: &mut [f64], missing: &[bool], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w || missing.len() != h * w {
        return Err(invalid!("fill_nearest: grid is {h}x{w} but got {} values, {} flags", values.len(), missing.len()));
    }
    if missing.iter().all(|&m| m) {
        return Ok(());
    }
    let src = values.to_vec();
    for q in (0..h * w).filter(|&q| missing[q]) {
        let (r, c) = ((q / w) as isize, (q % w) as isize);
        // Grow square rings; the ring is scanned in full and the lowest
        // row-major index at the smallest radius is taken.
        for rad in 1..h.max(w) as isize {
            let mut best: Option<usize> = None;
            for rr in (r - rad).max(0)..=(r + rad).min(h as isize - 1) {
                let on_edge_row = (rr - r).abs() == rad;
                let cols: Vec<isize> = if on_edge_row {
                    ((c - rad).max(0)..=(c + rad).min(w as isize - 1)).collect()
                } else {
                    [c - rad, c + rad].into_iter().filter(|&cc| cc >= 0 && cc < w as isize).collect()
                };
                for cc in cols {
                    let k = rr as usize * w + cc as usize;
                    if !missing[k] && best.is_none_or(|b| k < b) {
                        best = Some(k);
                    }
                }
            }
            if let Some(k) = best {
                values[q] = src[k];
                break;
            }
        }
    }
    Ok(())
}

type Indexed = Vec<(usize, PatchRecord)>;

/// Keeps at most `max_train` train and `max_val` val records per area, then
/// drops every train record in an area that also holds val records. Output
/// is ordered by area, then by input order.
pub fn cap_and_dedup(records: Vec<PatchRecord>, max_train: usize, max_val: usize, rng: &mut impl Rng) -> Vec<PatchRecord> {
    let mut by_area: BTreeMap<AreaId, (Indexed, Indexed)> = BTreeMap::new();
    for (i, r) in records.into_iter().enumerate() {
        let slot = by_area.entry(r.area.clone()).or_default();
        match r.split {
            Split::Train => slot.0.push((i, r)),
            Split::Val => slot.1.push((i, r)),
        }
    }
    let mut out = Vec::new();
    for (_, (mut train, mut val)) in by_area {
        for (group, cap) in [(&mut train, max_train), (&mut val, max_val)] {
            if group.len() > cap {
                group.shuffle(rng);
                group.truncate(cap);
                group.sort_by_key(|(i, _)| *i);
            }
        }
        if !val.is_empty() {
            train.clear();
        }
        let mut kept: Vec<(usize, PatchRecord)> = train.into_iter().chain(val).collect();
        kept.sort_by_key(|(i, _)| *i);
        out.extend(kept.into_iter().map(|(_, r)| r));
    }
    out
}

/// A block that is open water at every timestamp.
pub fn is_full_sea(p: &PatchRecord) -> bool {
    !p.qa.is_empty() && p.qa.iter().all(|q| q.water_frac >= 1.0)
}

/// Retains each record flagged in `sea` or lying on a tile in `desert_tiles`
/// with probability `rate`. Unflagged records are always kept.
pub fn subsample_homogeneous(
    records: Vec<PatchRecord>,
    sea: &[bool],
    desert_tiles: &BTreeSet<String>,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<PatchRecord>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(invalid!("subsample rate {rate} outside (0, 1]"));
    }
    if sea.len() != records.len() {
        return Err(invalid!("{} sea flags for {} records", sea.len(), records.len()));
    }
    Ok(records
        .into_iter()
        .zip(sea)
        .filter(|(r, &s)| !(s || desert_tiles.contains(&r.area.tile_id)) || rate >= 1.0 || rng.random_bool(rate))
        .map(|(r, _)| r)
        .collect())
}

const PATCH_HEADER: [&str; 7] = ["tile_id", "row", "col", "split", "dates", "cloud_frac", "missing_frac"];

fn join<T: ToString>(v: impl IntoIterator<Item = T>, sep: &str) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn write_patches(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::Format {
        what: "patch manifest",
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PATCH_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.area.tile_id.clone(),
            r.area.row.to_string(),
            r.area.col.to_string(),
            r.split.to_string(),
            join(r.dates.iter().map(|d| format_date(*d)), ";"),
            join(r.cloud_frac(), ";"),
            join(r.qa.iter().map(|q| join(&q.missing_frac, ";")), "|"),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        what: "patch manifest",
        detail: e.into_error().to_string(),
    })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Water fractions are not stored in the manifest and read back as 0.
pub fn read_patches(path: &Path) -> Result<Vec<PatchRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let header = rdr.headers().map_err(|e| Error::Format {
        what: "patch manifest",
        detail: e.to_string(),
    })?;
    if header.iter().ne(PATCH_HEADER) {
        return Err(Error::Format {
            what: "patch manifest",
            detail: format!("header must be {}", PATCH_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let bad = |detail: String| Error::Row {
            what: "patch manifest",
            row,
            detail,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let int = |s: &str| s.trim().parse::<u32>().map_err(|_| bad(format!("bad block index {s:?}")));
        let dates = rec[4]
            .split(';')
            .map(|s| parse_date(s).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let cloud = rec[5].split(';').map(num).collect::<Result<Vec<_>>>()?;
        let missing = rec[6]
            .split('|')
            .map(|g| g.split(';').map(num).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if cloud.len() != dates.len() || missing.len() != dates.len() {
            return Err(bad("QA columns do not match the number of dates".into()));
        }
        out.push(PatchRecord {
            area: AreaId {
                tile_id: rec[0].to_string(),
                row: int(&rec[1])?,
                col: int(&rec[2])?,
            },
            dates,
            qa: cloud
                .into_iter()
                .zip(missing)
                .map(|(cloud_frac, missing_frac)| BlockQa {
                    cloud_frac,
                    water_frac: 0.0,
                    missing_frac,
                })
                .collect(),
            split: rec[3].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(out)
}
