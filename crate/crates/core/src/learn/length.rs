use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};

use super::{FitFlag, LearnError, ModelArtifact, ModelConfig, ModelKind, Params, TrainingMeta};
use crate::linalg::cholesky_solve;
use crate::preprocess::FeatureMatrix;
use crate::scalar::Scalar;

pub(crate) fn raw_prediction<F: Scalar>(coefficients: &[F], x: ArrayView1<'_, F>) -> F {
    coefficients[0]
        + coefficients[1..]
            .iter()
            .zip(x.iter())
            .map(|(&b, &v)| b * v)
            .sum::<F>()
}

pub(crate) fn predict_months<F: Scalar>(coefficients: &[F], x: ArrayView1<'_, F>) -> F {
    raw_prediction(coefficients, x).max(F::zero())
}

/// Gaussian identity-link GLM: ridge least squares on the normal equations
/// with the intercept left unpenalized.
pub fn fit_length_glm<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    let started = Instant::now();
    config.validate()?;
    let (n, d) = matrix.x.dim();
    if n == 0 || matrix.lengths.len() != n {
        return Err(LearnError::InsufficientData(
            "length regression needs one length per row".into(),
        ));
    }
    if matrix.lengths.iter().any(|&l| !(l >= F::zero())) {
        return Err(LearnError::InsufficientData("lengths must be >= 0".into()));
    }
    let p = d + 1;
    let mut z = Array2::<F>::ones((n, p));
    z.slice_mut(ndarray::s![.., 1..]).assign(&matrix.x);
    let y = Array1::from(matrix.lengths.clone());
    let gram = z.t().dot(&z);
    let rhs = z.t().dot(&y);

    let mut lambda = F::lit(config.lambda);
    let mut flags = Vec::new();
    let beta = loop {
        let mut a = gram.clone();
        for j in 1..p {
            a[[j, j]] += lambda;
        }
        if let Some(b) = cholesky_solve(&a, &rhs) {
            break b;
        }
        if !flags.contains(&FitFlag::SingularSystem) {
            flags.push(FitFlag::SingularSystem);
        }
        let next = if lambda > F::zero() { lambda * F::lit(10.0) } else { F::lit(1e-8) * (gram[[0, 0]]) };
        if !next.is_finite() {
            return Err(LearnError::InsufficientData("normal equations stay singular".into()));
        }
        lambda = next;
    };
    let coefficients = beta.to_vec();
    let fitted = z.dot(&beta);
    let rss: F = fitted.iter().zip(y.iter()).map(|(&f, &t)| (t - f) * (t - f)).sum();
    let mae: F = matrix
        .x
        .rows()
        .into_iter()
        .zip(y.iter())
        .map(|(row, &t)| (t - predict_months(&coefficients, row)).abs())
        .sum::<F>()
        / F::from_count(n);
    let meta = TrainingMeta {
        iterations: 1,
        objective: rss.as_f64(),
        seconds: None,
        flags,
        effective_lambda: lambda.as_f64(),
        training_mae: Some(mae.as_f64()),
        n_train: n,
    };
    Ok(ModelArtifact::assemble(
        ModelKind::LengthGlm,
        matrix,
        Params::Length { coefficients },
        meta,
        config,
        started,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn matrix(x: Array2<f64>, lengths: Vec<f64>) -> FeatureMatrix<f64> {
        let names: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        FeatureMatrix::from_raw(x, vec![], lengths, &names).unwrap()
    }

    fn coef(a: &ModelArtifact<f64>) -> &[f64] {
        match &a.params {
            Params::Length { coefficients } => coefficients,
            _ => unreachable!(),
        }
    }

    fn cfg(lambda: f64) -> ModelConfig {
        ModelConfig {
            lambda,
            ..ModelConfig::new(ModelKind::LengthGlm)
        }
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = array![[0.0], [1.0], [2.0], [5.0]];
        let y = vec![3.0, 5.0, 7.0, 13.0];
        let a = fit_length_glm(&matrix(x, y), &cfg(0.0)).unwrap();
        assert!((coef(&a)[0] - 3.0).abs() < 1e-9);
        assert!((coef(&a)[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn huge_penalty_shrinks_to_mean() {
        let x = array![[0.0], [1.0], [2.0], [5.0]];
        let y = vec![3.0, 5.0, 7.0, 13.0];
        let a = fit_length_glm(&matrix(x, y), &cfg(1e12)).unwrap();
        assert!(coef(&a)[1].abs() < 1e-9);
        assert!((coef(&a)[0] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn predictions_are_clamped_at_zero() {
        let x = array![[0.0], [1.0], [2.0]];
        let a = fit_length_glm(&matrix(x, vec![2.0, 1.0, 0.0]), &cfg(0.0)).unwrap();
        assert_eq!(a.months(array![10.0].view()).unwrap(), 0.0);
        assert!(a.probabilities(array![1.0].view()).is_err());
    }

    #[test]
    fn negative_length_is_rejected() {
        let x = array![[0.0], [1.0]];
        assert!(fit_length_glm(&matrix(x, vec![1.0, -1.0]), &cfg(0.0)).is_err());
    }

    #[test]
    fn collinear_columns_raise_penalty() {
        let x = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let a = fit_length_glm(&matrix(x, vec![1.0, 2.0, 3.0, 4.0]), &cfg(0.0)).unwrap();
        assert!(a.training_meta.has_flag(FitFlag::SingularSystem));
        assert!(a.training_meta.effective_lambda > 0.0);
    }
}
