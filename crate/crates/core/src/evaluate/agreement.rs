use serde::{Deserialize, Serialize};

use super::{mean_sd, EvalError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub n: usize,
    /// Mean absolute error, in the units of the inputs.
    pub mae: f64,
    pub pearson_r: f64,
}

fn check(actual: &[f64], predicted: &[f64]) -> Result<(), EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    if actual.len() < 2 {
        return Err(EvalError::InvalidArgument("need at least two pairs".into()));
    }
    Ok(())
}

fn mae(actual: &[f64], predicted: &[f64]) -> f64 {
    actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).abs())
        .sum::<f64>()
        / actual.len() as f64
}

fn pearson(actual: &[f64], predicted: &[f64]) -> Result<f64, EvalError> {
    let n = actual.len() as f64;
    let ma = actual.iter().sum::<f64>() / n;
    let mp = predicted.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut spp) = (0.0, 0.0, 0.0);
    for (a, p) in actual.iter().zip(predicted) {
        sab += (a - ma) * (p - mp);
        saa += (a - ma) * (a - ma);
        spp += (p - mp) * (p - mp);
    }
    if saa == 0.0 {
        return Err(EvalError::ZeroVariance("actual values"));
    }
    if spp == 0.0 {
        return Err(EvalError::ZeroVariance("predicted values"));
    }
    Ok((sab / (saa.sqrt() * spp.sqrt())).clamp(-1.0, 1.0))
}

pub fn regression_metrics(actual: &[f64], predicted: &[f64]) -> Result<RegressionMetrics, EvalError> {
    check(actual, predicted)?;
    Ok(RegressionMetrics {
        n: actual.len(),
        mae: mae(actual, predicted),
        pearson_r: pearson(actual, predicted)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementPair {
    pub mean: f64,
    /// actual − predicted
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pairs: Vec<AgreementPair>,
    /// Mean difference (actual − predicted).
    pub bias: f64,
    /// Sample SD of the differences.
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    pub mae: f64,
    /// `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
}

impl AgreementReport {
    pub fn coverage(&self) -> f64 {
        let inside = self
            .pairs
            .iter()
            .filter(|p| p.difference >= self.lower && p.difference <= self.upper)
            .count();
        inside as f64 / self.pairs.len() as f64
    }
}

/// Bland-Altman agreement with limits at bias ± 1.96 SD.
pub fn bland_altman(actual: &[f64], predicted: &[f64]) -> Result<AgreementReport, EvalError> {
    check(actual, predicted)?;
    let pairs: Vec<AgreementPair> = actual
        .iter()
        .zip(predicted)
        .map(|(&a, &p)| AgreementPair {
            mean: (a + p) / 2.0,
            difference: a - p,
        })
        .collect();
    let diffs: Vec<f64> = pairs.iter().map(|p| p.difference).collect();
    let (bias, sd) = mean_sd(&diffs);
    Ok(AgreementReport {
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
        mae: mae(actual, predicted),
        pearson_r: pearson(actual, predicted).ok(),
        pairs,
    })
}
