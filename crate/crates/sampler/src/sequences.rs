//! Four-date sequences with bounded calendar-month gaps.

use chrono::{Datelike, NaiveDate};
use rand::Rng;

use geomae_core::posenc::AcqDate;

pub const SEQ_LEN: usize = 4;
pub const MIN_GAP_MONTHS: i32 = 1;
pub const MAX_GAP_MONTHS: i32 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceCaps {
    pub train: usize,
    pub val: usize,
}

impl Default for SequenceCaps {
    fn default() -> Self {
        SequenceCaps { train: 1500, val: 250 }
    }
}

impl SequenceCaps {
    pub fn for_split(&self, val: bool) -> usize {
        if val {
            self.val
        } else {
            self.train
        }
    }
}

/// Months since year 0 of the calendar month holding `d`. The day is ignored.
pub fn month_index(d: AcqDate) -> i32 {
    let month = NaiveDate::from_yo_opt(d.year, d.doy as u32)
        .map(|n| n.month0() as i32)
        // Day 366 of a common year; AcqDate allows it, the calendar does not.
        .unwrap_or(11);
    d.year * 12 + month
}

pub fn month_gap(a: AcqDate, b: AcqDate) -> i32 {
    month_index(b) - month_index(a)
}

pub fn gap_ok(a: AcqDate, b: AcqDate) -> bool {
    a < b && (MIN_GAP_MONTHS..=MAX_GAP_MONTHS).contains(&month_gap(a, b))
}

pub fn is_valid_sequence(dates: &[AcqDate]) -> bool {
    dates.len() == SEQ_LEN && dates.windows(2).all(|w| gap_ok(w[0], w[1]))
}

/// Calls `f` with the scene indices of every valid sequence, in
/// lexicographic order. `dates` must be sorted.
pub fn for_each_sequence(dates: &[AcqDate], mut f: impl FnMut([usize; SEQ_LEN])) {
    fn rec(dates: &[AcqDate], cur: &mut Vec<usize>, f: &mut dyn FnMut([usize; SEQ_LEN])) {
        if cur.len() == SEQ_LEN {
            f([cur[0], cur[1], cur[2], cur[3]]);
            return;
        }
        let start = cur.last().map_or(0, |&i| i + 1);
        for j in start..dates.len() {
            if let Some(&i) = cur.last() {
                let g = month_gap(dates[i], dates[j]);
                if g > MAX_GAP_MONTHS {
                    break;
                }
                if !gap_ok(dates[i], dates[j]) {
                    continue;
                }
            }
            cur.push(j);
            rec(dates, cur, f);
            cur.pop();
        }
    }
    rec(dates, &mut Vec::with_capacity(SEQ_LEN), &mut f);
}

/// Uniform sample of at most `cap` valid sequences over date-sorted scene
/// dates, returned as scene indices in enumeration order.
///
/// Reservoir sampling keeps memory bounded by `cap` however many candidates
/// the scene list admits.
pub fn build_sequences(dates: &[AcqDate], cap: usize, rng: &mut impl Rng) -> Vec<[usize; SEQ_LEN]> {
    debug_assert!(dates.windows(2).all(|w| w[0] <= w[1]), "scene dates must be sorted");
    let mut kept: Vec<(u64, [usize; SEQ_LEN])> = Vec::with_capacity(cap.min(4096));
    let mut seen = 0u64;
    if cap == 0 {
        return Vec::new();
    }
    for_each_sequence(dates, |s| {
        if kept.len() < cap {
            kept.push((seen, s));
        } else {
            let j = rng.random_range(0..=seen);
            if (j as usize) < cap {
                kept[j as usize] = (seen, s);
            }
        }
        seen += 1;
    });
    kept.sort_unstable_by_key(|&(k, _)| k);
    kept.into_iter().map(|(_, s)| s).collect()
}
