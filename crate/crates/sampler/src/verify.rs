//! Exhaustive post-hoc checks of a built dataset.
//!
//! The checks recompute everything from the records and the tile split
//! rather than trusting the pipeline's own bookkeeping. Month gaps use a
//! separate (year, month) computation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{Datelike, NaiveDate};

use geomae_core::posenc::AcqDate;

use crate::patches::{AreaId, Split, MAX_CLOUD, MAX_MISSING};
use crate::pipeline::{Dataset, PipelineConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn calendar_month(d: AcqDate) -> Option<i32> {
    let n = NaiveDate::from_ymd_opt(d.year, 1, 1)?.checked_add_days(chrono::Days::new(d.doy as u64 - 1))?;
    Some(n.year() * 12 + n.month() as i32)
}

fn check(name: &'static str, bad: usize, what: &str, first: Option<String>) -> Check {
    Check {
        name,
        passed: bad == 0,
        detail: match first {
            Some(f) if bad > 0 => format!("{bad} {what}, first: {f}"),
            _ => format!("0 {what}"),
        },
    }
}

pub fn verify(ds: &Dataset, cfg: &PipelineConfig) -> Report {
    let mut checks = Vec::new();
    let recs = &ds.records;

    let mut bad = 0;
    let mut first = None;
    for r in recs {
        let months: Option<Vec<i32>> = r.dates.iter().map(|&d| calendar_month(d)).collect();
        let ok = r.dates.len() == 4
            && months.is_some_and(|m| m.windows(2).all(|w| (1..=6).contains(&(w[1] - w[0]))))
            && r.dates.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            bad += 1;
            first.get_or_insert_with(|| format!("{:?} {:?}", r.area, r.dates));
        }
    }
    checks.push(check("month gaps in [1, 6]", bad, "sequences out of range", first));

    let mut first = None;
    let bad = recs
        .iter()
        .filter(|r| r.qa.len() != r.dates.len() || r.qa.iter().any(|q| q.missing_frac.is_empty() || q.missing_frac.iter().any(|&m| m > MAX_MISSING)))
        .inspect(|r| {
            first.get_or_insert_with(|| format!("{:?}", r.area));
        })
        .count();
    checks.push(check("missing <= 1% per band", bad, "patches over the limit", first));

    let mut first = None;
    let bad = recs
        .iter()
        .filter(|r| r.qa.iter().any(|q| q.cloud_frac > MAX_CLOUD))
        .inspect(|r| {
            first.get_or_insert_with(|| format!("{:?}", r.area));
        })
        .count();
    checks.push(check("cloud <= 20%", bad, "patches over the limit", first));

    let mut per_area: BTreeMap<(&AreaId, Split), usize> = BTreeMap::new();
    for r in recs {
        *per_area.entry((&r.area, r.split)).or_default() += 1;
    }
    let mut first = None;
    let bad = per_area
        .iter()
        .filter(|((_, s), &n)| n > if *s == Split::Val { cfg.max_val_per_area } else { cfg.max_train_per_area })
        .inspect(|((a, s), n)| {
            first.get_or_insert_with(|| format!("{a:?} has {n} {s}"));
        })
        .count();
    checks.push(check("per-area caps", bad, "areas over the cap", first));

    let val_areas: BTreeSet<&AreaId> = recs.iter().filter(|r| r.split == Split::Val).map(|r| &r.area).collect();
    let mut first = None;
    let bad = recs
        .iter()
        .filter(|r| r.split == Split::Train && val_areas.contains(&r.area))
        .inspect(|r| {
            first.get_or_insert_with(|| format!("{:?}", r.area));
        })
        .count();
    checks.push(check("train/val area overlap", bad, "train records in val areas", first));

    let train: BTreeSet<&String> = ds.selection.train.iter().collect();
    let val: BTreeSet<&String> = ds.selection.val.iter().collect();
    let n = train.len() + val.len();
    let want_train = (n as f64 * cfg.selection.train_frac).round() as usize;
    let disjoint = train.is_disjoint(&val);
    let mislabeled = recs
        .iter()
        .filter(|r| {
            let t = &r.area.tile_id;
            match r.split {
                Split::Train => !train.contains(t),
                Split::Val => !val.contains(t),
            }
        })
        .count();
    checks.push(Check {
        name: "tile-level split",
        passed: disjoint && train.len() == want_train && mislabeled == 0,
        detail: format!(
            "{} train / {} val tiles (expected {want_train} / {}), {mislabeled} records on the wrong side{}",
            train.len(),
            val.len(),
            n - want_train,
            if disjoint { "" } else { ", split sets overlap" }
        ),
    });

    let mut distinct: BTreeMap<&str, BTreeSet<&[AcqDate]>> = BTreeMap::new();
    for r in recs {
        distinct.entry(&r.area.tile_id).or_default().insert(&r.dates);
    }
    let cap = |t: &str| cfg.sequence_caps.for_split(val.contains(&t.to_string()));
    let mut first = None;
    let bad = ds
        .sequences
        .iter()
        .map(|(t, &k)| (t.as_str(), k))
        .chain(distinct.iter().map(|(t, s)| (*t, s.len())))
        .filter(|&(t, k)| k > cap(t))
        .inspect(|(t, k)| {
            first.get_or_insert_with(|| format!("{t} has {k}"));
        })
        .count();
    checks.push(check("per-tile sequence caps", bad, "tiles over the cap", first));

    Report { checks }
}
