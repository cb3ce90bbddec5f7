use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{check_classification_input, FitFlag, LearnError, ModelArtifact, ModelConfig, ModelKind, Params, TrainingMeta};
use crate::cohort::OutcomeLabel;
use crate::linalg::cholesky_solve;
use crate::preprocess::FeatureMatrix;
use crate::scalar::{log_sum_exp, softmax_in_place, Scalar};

const K: usize = OutcomeLabel::COUNT;

/// `[1, x]` design with a leading intercept column.
fn design<F: Scalar>(x: ArrayView2<'_, F>) -> Array2<F> {
    let (n, d) = x.dim();
    let mut z = Array2::<F>::ones((n, d + 1));
    z.slice_mut(s![.., 1..]).assign(&x);
    z
}

fn dot_row<F: Scalar>(coef: &[F], x: ArrayView1<'_, F>) -> F {
    coef[0] + coef[1..].iter().zip(x.iter()).map(|(&b, &v)| b * v).sum::<F>()
}

fn sigmoid<F: Scalar>(s: F) -> F {
    if s >= F::zero() {
        F::one() / (F::one() + (-s).exp())
    } else {
        let e = s.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_probabilities<F: Scalar>(coefficients: &[Vec<F>], x: ArrayView1<'_, F>, out: &mut [F; K]) {
    for (o, row) in out.iter_mut().zip(coefficients) {
        *o = dot_row(row, x);
    }
    softmax_in_place(&mut out[..]);
}

pub(crate) fn ovr_probabilities<F: Scalar>(coefficients: &[Vec<F>], x: ArrayView1<'_, F>, out: &mut [F; K]) {
    for (o, row) in out.iter_mut().zip(coefficients) {
        *o = sigmoid(dot_row(row, x));
    }
    let total: F = out.iter().copied().sum();
    if total > F::zero() {
        out.iter_mut().for_each(|v| *v /= total);
    } else {
        out.iter_mut().for_each(|v| *v = F::one() / F::from_count(K));
    }
}

/// Multinomial log-likelihood of `labels` under softmax scores from
/// `coefficients` (rows in label order, `[intercept, slopes...]`), minus
/// `lambda / 2` times the squared slopes.
pub fn penalized_log_likelihood<F: Scalar>(
    coefficients: &[Vec<F>],
    matrix: &FeatureMatrix<F>,
    lambda: F,
) -> F {
    let mut ll = F::zero();
    let mut scores = vec![F::zero(); coefficients.len()];
    for (row, label) in matrix.x.rows().into_iter().zip(&matrix.labels) {
        for (s, c) in scores.iter_mut().zip(coefficients) {
            *s = dot_row(c, row);
        }
        ll += scores[label.index()] - log_sum_exp(&scores);
    }
    let penalty: F = coefficients
        .iter()
        .flat_map(|c| c[1..].iter())
        .map(|&b| b * b)
        .sum();
    ll - lambda * penalty / F::lit(2.0)
}

pub(crate) struct NewtonFit<F> {
    /// `k × (d + 1)`, reference row zero.
    pub coef: Array2<F>,
    pub iterations: usize,
    pub objective: F,
    pub lambda: F,
    pub flags: Vec<FitFlag>,
}

fn objective<F: Scalar>(z: &Array2<F>, y: &[usize], coef: &Array2<F>, lambda: F) -> F {
    let scores = z.dot(&coef.t()).as_standard_layout().into_owned();
    let mut ll = F::zero();
    for (row, &c) in scores.rows().into_iter().zip(y) {
        ll += row[c] - log_sum_exp(row.as_slice().expect("row-major scores"));
    }
    let penalty: F = coef.slice(s![.., 1..]).iter().map(|&b| b * b).sum();
    ll - lambda * penalty / F::lit(2.0)
}

/// Newton-Raphson (IRLS) ascent of the ridge-penalized softmax
/// log-likelihood over `k` classes, with the `reference` row held at zero.
pub(crate) fn newton_softmax<F: Scalar>(
    z: &Array2<F>,
    y: &[usize],
    k: usize,
    reference: usize,
    lambda: F,
    max_iterations: usize,
    tolerance: F,
) -> NewtonFit<F> {
    let (n, p) = z.dim();
    let free: Vec<usize> = (0..k).filter(|&c| c != reference).collect();
    let m = free.len();
    let mut counts = vec![0usize; k];
    for &c in y {
        counts[c] += 1;
    }
    let mut coef = Array2::<F>::zeros((k, p));
    for &c in &free {
        let ratio = (F::from_count(counts[c]) + F::lit(0.5)) / (F::from_count(counts[reference]) + F::lit(0.5));
        coef[[c, 0]] = ratio.ln();
    }
    let mut onehot = Array2::<F>::zeros((n, k));
    for (i, &c) in y.iter().enumerate() {
        onehot[[i, c]] = F::one();
    }

    let mut lambda = lambda;
    let mut flags = Vec::new();
    let mut obj = objective(z, y, &coef, lambda);
    let mut iterations = 0;
    let mut last_change = F::infinity();
    let mut raises = 0;
    while iterations < max_iterations {
        let mut probs = z.dot(&coef.t()).as_standard_layout().into_owned();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("row-major"));
        }
        let resid = &onehot - &probs;
        let mut grad = Array1::<F>::zeros(m * p);
        let mut hess = Array2::<F>::zeros((m * p, m * p));
        for (a, &ca) in free.iter().enumerate() {
            let mut g = z.t().dot(&resid.column(ca));
            for j in 1..p {
                g[j] -= lambda * coef[[ca, j]];
            }
            grad.slice_mut(s![a * p..(a + 1) * p]).assign(&g);
            for (b, &cb) in free.iter().enumerate().skip(a) {
                let w: Array1<F> = if a == b {
                    probs.column(ca).mapv(|v| v * (F::one() - v))
                } else {
                    (&probs.column(ca) * &probs.column(cb)).mapv(|v| -v)
                };
                let zw = z * &w.insert_axis(Axis(1));
                let block = z.t().dot(&zw);
                hess.slice_mut(s![a * p..(a + 1) * p, b * p..(b + 1) * p]).assign(&block);
                if a != b {
                    hess.slice_mut(s![b * p..(b + 1) * p, a * p..(a + 1) * p]).assign(&block.t());
                }
            }
            for j in 1..p {
                hess[[a * p + j, a * p + j]] += lambda;
            }
        }
        let Some(delta) = cholesky_solve(&hess, &grad) else {
            if raises >= 12 {
                break;
            }
            raises += 1;
            lambda = if lambda > F::zero() { lambda * F::lit(10.0) } else { F::lit(1e-6) };
            if !flags.contains(&FitFlag::SingularSystem) {
                flags.push(FitFlag::SingularSystem);
            }
            obj = objective(z, y, &coef, lambda);
            continue;
        };
        iterations += 1;
        let mut step = F::one();
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = coef.clone();
            for (a, &ca) in free.iter().enumerate() {
                for j in 0..p {
                    trial[[ca, j]] += step * delta[a * p + j];
                }
            }
            let t_obj = objective(z, y, &trial, lambda);
            if t_obj >= obj {
                accepted = Some((trial, t_obj));
                break;
            }
            step = step / F::lit(2.0);
        }
        let Some((next, next_obj)) = accepted else {
            // no ascent possible at working precision
            last_change = F::zero();
            break;
        };
        debug_assert!(next_obj >= obj);
        last_change = (next_obj - obj) / obj.abs().max(F::min_positive_value());
        coef = next;
        obj = next_obj;
        if last_change < tolerance {
            break;
        }
    }
    if iterations >= max_iterations && last_change > tolerance * F::lit(100.0) {
        flags.push(FitFlag::NonConvergence);
    }
    NewtonFit {
        coef,
        iterations,
        objective: obj,
        lambda,
        flags,
    }
}

fn check_lambda<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<(), LearnError> {
    config.validate()?;
    if config.lambda == 0.0 && matrix.ncols() >= matrix.nrows() {
        return Err(LearnError::InvalidConfig(
            "lambda must be positive when features outnumber rows".into(),
        ));
    }
    Ok(())
}

/// Multinomial softmax regression. Classes missing from the training rows
/// get zero slopes and an intercept worth half an observation relative to
/// the reference class.
pub fn fit_glm<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    let started = Instant::now();
    check_classification_input(matrix)?;
    check_lambda(matrix, config)?;
    let mut counts = [0usize; K];
    for l in &matrix.labels {
        counts[l.index()] += 1;
    }
    let present: Vec<usize> = (0..K).filter(|&c| counts[c] > 0).collect();
    let reference_label = if counts[OutcomeLabel::Continue.index()] > 0 {
        OutcomeLabel::Continue.index()
    } else {
        *present.last().expect("at least two classes")
    };
    let local: Vec<usize> = matrix
        .labels
        .iter()
        .map(|l| present.iter().position(|&c| c == l.index()).expect("present"))
        .collect();
    let reference = present.iter().position(|&c| c == reference_label).expect("present");
    let z = design(matrix.x.view());
    let fit = newton_softmax(
        &z,
        &local,
        present.len(),
        reference,
        F::lit(config.lambda),
        config.max_iterations,
        F::lit(config.tolerance),
    );
    let p = z.ncols();
    let absent_intercept = (F::lit(0.5) / F::from_count(counts[reference_label])).ln();
    let coefficients: Vec<Vec<F>> = (0..K)
        .map(|c| match present.iter().position(|&q| q == c) {
            Some(local) => fit.coef.row(local).to_vec(),
            None => {
                let mut row = vec![F::zero(); p];
                row[0] = absent_intercept;
                row
            }
        })
        .collect();
    let meta = TrainingMeta {
        iterations: fit.iterations,
        objective: fit.objective.as_f64(),
        seconds: None,
        flags: fit.flags,
        effective_lambda: fit.lambda.as_f64(),
        training_mae: None,
        n_train: matrix.nrows(),
    };
    Ok(ModelArtifact::assemble(
        ModelKind::Glm,
        matrix,
        Params::Linear { coefficients },
        meta,
        config,
        started,
    ))
}

/// One-vs-rest ridge logistic regressions, one per outcome class, with the
/// per-class probabilities renormalized to sum to one.
pub fn fit_logreg<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    let started = Instant::now();
    check_classification_input(matrix)?;
    check_lambda(matrix, config)?;
    let n = matrix.nrows();
    let z = design(matrix.x.view());
    let p = z.ncols();
    let mut coefficients = Vec::with_capacity(K);
    let mut iterations = 0;
    let mut objective = F::zero();
    let mut flags: Vec<FitFlag> = Vec::new();
    let mut effective = F::lit(config.lambda);
    for label in OutcomeLabel::ALL {
        let y: Vec<usize> = matrix.labels.iter().map(|&l| usize::from(l == label)).collect();
        if !y.contains(&1) {
            let mut row = vec![F::zero(); p];
            row[0] = (F::lit(0.5) / (F::from_count(n) + F::lit(0.5))).ln();
            coefficients.push(row);
            continue;
        }
        let fit = newton_softmax(
            &z,
            &y,
            2,
            0,
            F::lit(config.lambda),
            config.max_iterations,
            F::lit(config.tolerance),
        );
        iterations = iterations.max(fit.iterations);
        objective += fit.objective;
        effective = effective.max(fit.lambda);
        for f in fit.flags {
            if !flags.contains(&f) {
                flags.push(f);
            }
        }
        coefficients.push(fit.coef.row(1).to_vec());
    }
    let meta = TrainingMeta {
        iterations,
        objective: objective.as_f64(),
        seconds: None,
        flags,
        effective_lambda: effective.as_f64(),
        training_mae: None,
        n_train: n,
    };
    Ok(ModelArtifact::assemble(
        ModelKind::Logreg,
        matrix,
        Params::Linear { coefficients },
        meta,
        config,
        started,
    ))
}
