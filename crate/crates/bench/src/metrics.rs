//! Classification, segmentation and regression scores.

use crate::error::{invalid, Result};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(invalid!("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n || pred >= self.n {
            return Err(invalid!("label pair ({truth}, {pred}) outside {} classes", self.n));
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(invalid!("cannot merge {}-class and {}-class matrices", self.n, other.n));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// True-class totals.
    pub fn support(&self) -> Vec<u64> {
        (0..self.n).map(|t| (0..self.n).map(|p| self.get(t, p)).sum()).collect()
    }
}

pub fn confusion(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(invalid!("{} predictions for {} labels", pred.len(), truth.len()));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in pred.iter().zip(truth) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

/// How classes absent from the ground truth enter macro averages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZeroSupport {
    #[default]
    Exclude,
    /// Average over every class; undefined per-class values count as 0.
    IncludeAsZero,
}

/// Per-class entries are `None` where the ratio is 0/0.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub overall_acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// Macro-averaged.
    pub precision: f64,
    /// Macro-averaged.
    pub recall: f64,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    scores_with(cm, ZeroSupport::Exclude)
}

pub fn scores_with(cm: &ConfusionMatrix, zero: ZeroSupport) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(invalid!("cannot score an empty confusion matrix"));
    }
    let n = cm.n_classes();
    let support = cm.support();
    let tp: Vec<u64> = (0..n).map(|c| cm.get(c, c)).collect();
    let predicted: Vec<u64> = (0..n).map(|p| (0..n).map(|t| cm.get(t, p)).sum()).collect();
    let fp: Vec<u64> = (0..n).map(|c| predicted[c] - tp[c]).collect();
    let fn_: Vec<u64> = (0..n).map(|c| support[c] - tp[c]).collect();

    let iou: Vec<Option<f64>> = (0..n).map(|c| ratio(tp[c], tp[c] + fp[c] + fn_[c])).collect();
    let f1: Vec<Option<f64>> = (0..n).map(|c| ratio(2 * tp[c], 2 * tp[c] + fp[c] + fn_[c])).collect();
    let prec: Vec<Option<f64>> = (0..n).map(|c| ratio(tp[c], predicted[c])).collect();
    let rec: Vec<Option<f64>> = (0..n).map(|c| ratio(tp[c], support[c])).collect();

    let macro_mean = |v: &[Option<f64>]| {
        let picked: Vec<f64> = (0..n)
            .filter(|&c| zero == ZeroSupport::IncludeAsZero || support[c] > 0)
            .map(|c| v[c].unwrap_or(0.0))
            .collect();
        picked.iter().sum::<f64>() / picked.len() as f64
    };
    let weighted_f1 = (0..n).map(|c| f1[c].unwrap_or(0.0) * support[c] as f64).sum::<f64>() / total as f64;
    Ok(Scores {
        overall_acc: tp.iter().sum::<u64>() as f64 / total as f64,
        miou: macro_mean(&iou),
        macro_f1: macro_mean(&f1),
        weighted_f1,
        precision: macro_mean(&prec),
        recall: macro_mean(&rec),
        per_class_iou: iou,
        per_class_f1: f1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionScores {
    pub rmse: f64,
    pub r2: f64,
}

pub fn regression_scores(pred: &[f64], truth: &[f64]) -> Result<RegressionScores> {
    if pred.len() != truth.len() {
        return Err(invalid!("{} predictions for {} targets", pred.len(), truth.len()));
    }
    if truth.len() < 2 {
        return Err(invalid!("regression scores need at least 2 samples"));
    }
    if pred.iter().chain(truth).any(|x| !x.is_finite()) {
        return Err(invalid!("non-finite value in regression inputs"));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let sst: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if sst == 0.0 {
        return Err(invalid!("R² is undefined when the targets have zero variance"));
    }
    Ok(RegressionScores {
        rmse: (sse / n).sqrt(),
        r2: 1.0 - sse / sst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![0, 3]]).unwrap();
        let s = scores(&cm).unwrap();
        assert_eq!(s.per_class_iou, vec![Some(2.0 / 3.0), Some(0.75)]);
        assert!((s.miou - 17.0 / 24.0).abs() < 1e-15);
        assert!((s.overall_acc - 5.0 / 6.0).abs() < 1e-15);
        // F1: 4/5 and 6/7; supports 3 and 3.
        assert!((s.macro_f1 - (0.8 + 6.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((s.weighted_f1 - s.macro_f1).abs() < 1e-15);
        assert!((s.precision - (1.0 + 0.75) / 2.0).abs() < 1e-15);
        assert!((s.recall - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases() {
        let cm = confusion(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_rows(&[vec![2, 0], vec![0, 2]]).unwrap());
        let s = scores(&cm).unwrap();
        for v in [s.overall_acc, s.miou, s.macro_f1, s.weighted_f1, s.precision, s.recall] {
            assert_eq!(v, 1.0);
        }
        let one = confusion(&[0], &[1], 2).unwrap();
        assert_eq!(one.get(1, 0), 1);
        let lazy = confusion(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(scores(&lazy).unwrap().overall_acc, 0.5);
        assert!(scores(&ConfusionMatrix::new(3)).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(confusion(&[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn zero_support_policy() {
        // Class 2 never occurs in the truth but is predicted once.
        let cm = confusion(&[0, 1, 2], &[0, 1, 1], 3).unwrap();
        let ex = scores_with(&cm, ZeroSupport::Exclude).unwrap();
        let inc = scores_with(&cm, ZeroSupport::IncludeAsZero).unwrap();
        assert_eq!(ex.per_class_iou[2], Some(0.0));
        assert!((ex.miou - 0.75).abs() < 1e-15);
        assert!((inc.miou - 0.5).abs() < 1e-15);
        assert_eq!(scores(&confusion(&[0, 1], &[0, 1], 3).unwrap()).unwrap().per_class_iou[2], None);
    }

    #[test]
    fn regression_cases() {
        let t = [1.0, 2.0, 4.0, 3.0, 5.0];
        let s = regression_scores(&t, &t).unwrap();
        assert_eq!((s.rmse, s.r2), (0.0, 1.0));
        let s = regression_scores(&[3.0; 5], &t).unwrap();
        assert_eq!(s.r2, 0.0);
        // sse = 0.25 + 0 + 1 + 0.25 + 1 = 2.5, sst = 10.
        let s = regression_scores(&[1.5, 2.0, 3.0, 3.5, 4.0], &t).unwrap();
        assert!((s.rmse - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.r2 - 0.75).abs() < 1e-15);
        assert!(regression_scores(&[1.0, 2.0], &[2.0, 2.0]).is_err());
        assert!(regression_scores(&[1.0], &[2.0]).is_err());
    }
}
