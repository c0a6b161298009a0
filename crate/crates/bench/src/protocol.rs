//! Evaluation protocol: budgeted hyperparameter search, seeded repeats,
//! leave-one-year-out splits and cross-dataset aggregation.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct HParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub decoder_depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub lr: (f64, f64),
    /// Sampled log-uniformly; a zero lower bound samples uniformly instead.
    pub weight_decay: (f64, f64),
    pub decoder_depth: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: (1e-5, 1e-2),
            weight_decay: (1e-4, 0.3),
            decoder_depth: vec![1, 2, 4],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if !ok(self.lr) || self.lr.0 <= 0.0 {
            return Err(invalid!("learning-rate range {:?} must be positive and ordered", self.lr));
        }
        if !ok(self.weight_decay) {
            return Err(invalid!("weight-decay range {:?} must be nonnegative and ordered", self.weight_decay));
        }
        if self.decoder_depth.is_empty() {
            return Err(invalid!("decoder depth set is empty"));
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else if lo <= 0.0 {
        rng.random_range(lo..=hi)
    } else {
        (rng.random_range(lo.ln()..=hi.ln())).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub id: usize,
    pub params: HParams,
    /// Validation score, higher is better, or the failure message.
    pub outcome: std::result::Result<f64, String>,
    pub wall_secs: f64,
}

/// Proposes the next configuration given the trials so far. Adaptive
/// strategies can look at `history`.
pub trait Strategy {
    fn propose(&mut self, space: &SearchSpace, history: &[Trial]) -> HParams;
}

pub struct RandomSearch {
    rng: ChaCha8Rng,
}

impl RandomSearch {
    pub fn new(seed: u64) -> Self {
        RandomSearch {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Strategy for RandomSearch {
    fn propose(&mut self, space: &SearchSpace, _history: &[Trial]) -> HParams {
        HParams {
            lr: log_uniform(&mut self.rng, space.lr),
            weight_decay: log_uniform(&mut self.rng, space.weight_decay),
            decoder_depth: space.decoder_depth[self.rng.random_range(0..space.decoder_depth.len())],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    /// Index into `trials` of the best successful trial; ties go to the
    /// earlier one. `None` when every trial failed.
    pub best: Option<usize>,
}

impl SearchResult {
    pub fn best_trial(&self) -> Option<&Trial> {
        self.best.map(|i| &self.trials[i])
    }
}

/// Evaluates exactly `budget` configurations. A failing or non-finite
/// objective is logged on its trial and the search goes on.
pub fn hparam_search<F>(mut objective: F, space: &SearchSpace, budget: usize, strategy: &mut dyn Strategy) -> Result<SearchResult>
where
    F: FnMut(usize, &HParams) -> std::result::Result<f64, String>,
{
    if budget == 0 {
        return Err(invalid!("search budget must be at least 1"));
    }
    space.validate()?;
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    for id in 0..budget {
        let params = strategy.propose(space, &trials);
        let t0 = Instant::now();
        let outcome = match objective(id, &params) {
            Ok(v) if !v.is_finite() => Err(format!("non-finite score {v}")),
            other => other,
        };
        if let Err(e) = &outcome {
            log::warn!("trial {id} failed: {e}");
        }
        trials.push(Trial {
            id,
            params,
            outcome,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
    }
    let mut best: Option<usize> = None;
    for (i, t) in trials.iter().enumerate() {
        if let Ok(v) = t.outcome {
            if best.is_none_or(|b| v > *trials[b].outcome.as_ref().unwrap()) {
                best = Some(i);
            }
        }
    }
    Ok(SearchResult { trials, best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub seed: u64,
    pub outcome: std::result::Result<f64, String>,
    pub wall_secs: f64,
}

/// Repeated runs and their summary. `mean` and `std` cover the successful
/// runs; `std` is the sample standard deviation (n − 1).
#[derive(Clone, Debug, PartialEq)]
pub struct RunAggregate {
    pub runs: Vec<Run>,
    pub mean: f64,
    pub std: f64,
    /// False when fewer than two runs succeeded; `std` is then 0.
    pub std_defined: bool,
    /// Some run failed.
    pub partial: bool,
}

impl RunAggregate {
    pub fn scores(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &str)> {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().err().map(|e| (r.seed, e.as_str())))
    }
}

/// Works on deviations from the first value, so constant input gives a
/// mean equal to that value and a std of exactly 0.
pub fn mean_and_sample_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let x0 = xs[0];
    let s1: f64 = xs.iter().map(|x| x - x0).sum();
    let s2: f64 = xs.iter().map(|x| (x - x0) * (x - x0)).sum();
    let std = (xs.len() >= 2).then(|| ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0).sqrt());
    (x0 + s1 / n, std)
}

/// Runs `f` with seeds `seed0 .. seed0 + n_seeds`.
pub fn repeat_eval<F>(mut f: F, seed0: u64, n_seeds: usize) -> Result<RunAggregate>
where
    F: FnMut(u64) -> std::result::Result<f64, String>,
{
    if n_seeds == 0 {
        return Err(invalid!("repeat count must be at least 1"));
    }
    let runs: Vec<Run> = (0..n_seeds as u64)
        .map(|k| {
            let seed = seed0 + k;
            let t0 = Instant::now();
            let outcome = match f(seed) {
                Ok(v) if !v.is_finite() => Err(format!("non-finite score {v}")),
                other => other,
            };
            Run {
                seed,
                outcome,
                wall_secs: t0.elapsed().as_secs_f64(),
            }
        })
        .collect();
    let ok: Vec<f64> = runs.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect();
    let partial = ok.len() < runs.len();
    let (mean, std) = if ok.is_empty() { (f64::NAN, None) } else { mean_and_sample_std(&ok) };
    Ok(RunAggregate {
        runs,
        mean,
        std: std.unwrap_or(0.0),
        std_defined: std.is_some(),
        partial,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct YearSplit {
    pub test_year: i32,
    pub train_years: Vec<i32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One split per distinct year: that year's records are the test set and
/// every other record trains. Splits are ordered by year.
pub fn loyo_splits(years: &[i32]) -> Result<Vec<YearSplit>> {
    let distinct: BTreeSet<i32> = years.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(invalid!("leave-one-year-out needs at least 2 distinct years, got {}", distinct.len()));
    }
    Ok(distinct
        .iter()
        .map(|&y| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..years.len()).partition(|&i| years[i] == y);
            YearSplit {
                test_year: y,
                train_years: distinct.iter().copied().filter(|&x| x != y).collect(),
                train,
                test,
            }
        })
        .collect())
}

/// `Train: 2019-2021` style label of a split's training years, with runs of
/// consecutive years collapsed.
pub fn describe_years(years: &[i32]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < years.len() {
        let mut j = i;
        while j + 1 < years.len() && years[j + 1] == years[j] + 1 {
            j += 1;
        }
        parts.push(if j > i { format!("{}-{}", years[i], years[j]) } else { years[i].to_string() });
        i = j + 1;
    }
    parts.join(", ")
}

/// Unweighted mean of per-dataset primary metrics; every dataset counts the
/// same regardless of its size.
pub fn cross_dataset_mean(per_dataset: &[(String, f64)]) -> Result<f64> {
    if per_dataset.is_empty() {
        return Err(invalid!("no datasets to aggregate"));
    }
    if let Some((name, v)) = per_dataset.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
        return Err(invalid!("{name}: metric {v} outside [0, 1]"));
    }
    Ok(per_dataset.iter().map(|(_, v)| v).sum::<f64>() / per_dataset.len() as f64)
}
