//! Cross-validation, confusion matrices, one-vs-rest ROC analysis,
//! regression metrics and Bland-Altman agreement.

mod agreement;
mod cv;
mod export;
mod roc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::OutcomeLabel;
use crate::learn::LearnError;
use crate::preprocess::PreprocessError;

pub use agreement::{bland_altman, regression_metrics, AgreementPair, AgreementReport, RegressionMetrics};
pub use cv::{
    cross_validate, cross_validate_length, holdout_split, evaluate_holdout, evaluate_length_holdout, CvOptions,
    CvReport, CvRun, FoldResult, HoldoutRun, LengthCvRun, LengthHoldoutRun, PcaSettings,
};
pub use export::{
    bland_altman_svg, roc_svg, write_auc_table_csv, write_confusion_csv, write_folds_csv, write_table2_csv,
    AucRow, Table2Row,
};
pub use roc::{roc_auc_ovr, roc_from_scores, RocCurve};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{n} rows cannot form {k} folds")]
    TooFewRows { n: usize, k: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no rows to evaluate")]
    Empty,
    #[error("AUC undefined for {group}: only one class present")]
    OneClassOnly { group: String },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

impl EvalError {
    pub fn name(&self) -> &'static str {
        match self {
            EvalError::TooFewRows { .. } => "TooFewRows",
            EvalError::LengthMismatch { .. } => "LengthMismatch",
            EvalError::Empty => "Empty",
            EvalError::OneClassOnly { .. } => "OneClassOnly",
            EvalError::ZeroVariance(_) => "ZeroVariance",
            EvalError::InvalidArgument(_) => "InvalidArgument",
            EvalError::Fold { source, .. } => source.name(),
            EvalError::Learn(e) => e.name(),
            EvalError::Preprocess(e) => e.name(),
        }
    }
}

/// Seeded shuffle of `0..n` dealt round-robin into `k` folds; each fold is
/// returned in ascending order.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidArgument("k must be at least 2".into()));
    }
    if n < k {
        return Err(EvalError::TooFewRows { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (i, row) in order.into_iter().enumerate() {
        folds[i % k].push(row);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Counts indexed `[predicted][true]` in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; OutcomeLabel::COUNT]; OutcomeLabel::COUNT],
}

/// One-vs-rest collapse of the confusion matrix for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: OutcomeLabel,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    /// (TP + TN) / (TP + FP + FN + TN)
    pub accuracy: f64,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; OutcomeLabel::COUNT]; OutcomeLabel::COUNT]) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, truth: OutcomeLabel, predicted: OutcomeLabel) {
        self.counts[predicted.index()][truth.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..OutcomeLabel::COUNT).map(|i| self.counts[i][i]).sum()
    }

    /// Pooled accuracy, trace / total.
    pub fn micro_accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn class_accuracy(&self, label: OutcomeLabel) -> ClassAccuracy {
        let c = label.index();
        let tp = self.counts[c][c];
        let fp: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let fn_: u64 = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
        let tn = self.total() - tp - fp - fn_;
        ClassAccuracy {
            label,
            tp,
            fp,
            fn_,
            tn,
            accuracy: (tp + tn) as f64 / self.total() as f64,
        }
    }

    pub fn per_class(&self) -> Vec<ClassAccuracy> {
        OutcomeLabel::ALL.iter().map(|&l| self.class_accuracy(l)).collect()
    }
}

pub fn confusion_and_accuracy(
    truth: &[OutcomeLabel],
    predicted: &[OutcomeLabel],
) -> Result<(ConfusionMatrix, f64), EvalError> {
    if truth.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut m = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        m.record(t, p);
    }
    let acc = m.micro_accuracy();
    Ok((m, acc))
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use OutcomeLabel::*;

    #[test]
    fn folds_of_681() {
        let f = kfold_split(681, 5, 42).unwrap();
        let mut sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![136, 136, 136, 136, 137]);
        assert_eq!(f, kfold_split(681, 5, 42).unwrap());
        assert_ne!(f, kfold_split(681, 5, 43).unwrap());
    }

    #[test]
    fn five_rows_five_singletons() {
        let f = kfold_split(5, 5, 1).unwrap();
        let mut all: Vec<usize> = f.iter().map(|s| {
            assert_eq!(s.len(), 1);
            s[0]
        }).collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(matches!(kfold_split(4, 5, 1), Err(EvalError::TooFewRows { .. })));
    }

    #[test]
    fn identical_predictions_are_diagonal() {
        let t = vec![AdverseEvent, Continue, Other, Continue];
        let (m, acc) = confusion_and_accuracy(&t, &t).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(m.trace(), 4);
        assert_eq!(m.counts[5][5], 2);
    }

    #[test]
    fn three_class_binary_collapse() {
        let t = vec![AdverseEvent, AdverseEvent, Other, Other, Continue, Continue];
        let p = vec![AdverseEvent, Other, Other, Continue, Continue, AdverseEvent];
        let (m, acc) = confusion_and_accuracy(&t, &p).unwrap();
        assert!((acc - 0.5).abs() < 1e-15);
        // adverse_event: TP 1 (row 0), FP 1 (row 5), FN 1 (row 1), TN 3
        let ae = m.class_accuracy(AdverseEvent);
        assert_eq!((ae.tp, ae.fp, ae.fn_, ae.tn), (1, 1, 1, 3));
        assert!((ae.accuracy - 4.0 / 6.0).abs() < 1e-15);
        let ot = m.class_accuracy(Other);
        assert_eq!((ot.tp, ot.fp, ot.fn_, ot.tn), (1, 1, 1, 3));
    }

    #[test]
    fn mismatched_lengths() {
        assert!(matches!(
            confusion_and_accuracy(&[Other], &[]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(confusion_and_accuracy(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(m, 0.0);
        assert!((s - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
