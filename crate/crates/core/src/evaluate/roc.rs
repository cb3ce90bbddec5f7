use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::cohort::{OutcomeLabel, RocGroup};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub group: RocGroup,
    /// `(false positive rate, true positive rate)` from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// ROC staircase and trapezoid AUC for binary labels. Equal scores are
/// handled as one threshold, which makes the area coincide with the
/// Mann-Whitney statistic (ties credited one half).
pub fn roc_from_scores(positive: &[bool], scores: &[f64]) -> Result<(Vec<(f64, f64)>, f64), EvalError> {
    if positive.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            left: positive.len(),
            right: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::InvalidArgument("non-finite score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(EvalError::OneClassOnly { group: String::new() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite"));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of one positive-negative pair
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dp, mut dn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                dp += 1;
            } else {
                dn += 1;
            }
            i += 1;
        }
        area2 += u128::from(dn) * u128::from(2 * tp + dp);
        tp += dp;
        fp += dn;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = area2 as f64 / (2.0 * p as f64 * n as f64);
    Ok((points, auc))
}

/// One-vs-rest ROC for a group of outcomes: rows whose label is in the
/// group are positives, the group score is the summed probability of its
/// labels.
pub fn roc_auc_ovr<F: Scalar>(
    truth: &[OutcomeLabel],
    probabilities: &Array2<F>,
    group: RocGroup,
) -> Result<RocCurve, EvalError> {
    if truth.len() != probabilities.nrows() {
        return Err(EvalError::LengthMismatch {
            left: truth.len(),
            right: probabilities.nrows(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let members = group.members();
    let positive: Vec<bool> = truth.iter().map(|&l| group.contains(l)).collect();
    let scores: Vec<f64> = probabilities
        .rows()
        .into_iter()
        .map(|row| members.iter().map(|m| row[m.index()].as_f64()).sum())
        .collect();
    let (points, auc) = roc_from_scores(&positive, &scores).map_err(|e| match e {
        EvalError::OneClassOnly { .. } => EvalError::OneClassOnly {
            group: group.token().to_string(),
        },
        other => other,
    })?;
    let positives = positive.iter().filter(|&&b| b).count();
    Ok(RocCurve {
        group,
        points,
        auc,
        positives,
        negatives: truth.len() - positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn four_scores_three_quarters() {
        let (_, auc) = roc_from_scores(&[true, true, false, false], &[0.9, 0.4, 0.5, 0.1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn separated_scores_full_area() {
        let (pts, auc) = roc_from_scores(&[true, false, true, false], &[0.8, 0.2, 0.7, 0.3]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn all_tied_is_half() {
        let (pts, auc) = roc_from_scores(&[true, false, false], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(
            roc_from_scores(&[true, true], &[0.1, 0.2]),
            Err(EvalError::OneClassOnly { .. })
        ));
    }

    #[test]
    fn group_scores_sum_member_probabilities() {
        use OutcomeLabel::*;
        let probs = array![
            [0.1, 0.1, 0.1, 0.1, 0.1, 0.5],
            [0.3, 0.1, 0.3, 0.1, 0.1, 0.1],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let truth = [Continue, LackOfEfficacy, Continue];
        let c = roc_auc_ovr(&truth, &probs, RocGroup::AnyReason).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!((c.positives, c.negatives), (1, 2));
        match roc_auc_ovr(&[Continue; 3], &probs, RocGroup::AdverseEvent) {
            Err(EvalError::OneClassOnly { group }) => assert_eq!(group, "adverse_event"),
            other => panic!("{other:?}"),
        }
    }
}
