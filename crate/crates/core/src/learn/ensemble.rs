use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow_classification, grow_regression, GrowParams, Tree};
use super::{FitFlag, LearnError, ModelArtifact, ModelConfig, ModelKind, Params, TrainingMeta};
use crate::cohort::OutcomeLabel;
use crate::preprocess::FeatureMatrix;
use crate::scalar::{log_sum_exp, softmax_in_place, Scalar};

const K: usize = OutcomeLabel::COUNT;

/// `-2 Σ ln p(true class)` with probabilities floored at 1e-300.
pub fn multinomial_deviance<F: Scalar>(probabilities: &Array2<F>, labels: &[OutcomeLabel]) -> f64 {
    probabilities
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, l)| -2.0 * p[l.index()].as_f64().max(1e-300).ln())
        .sum()
}

pub(crate) fn training_deviance<F: Scalar>(
    matrix: &FeatureMatrix<F>,
    predict: impl Fn(ArrayView1<'_, F>, &mut [F; K]),
) -> f64 {
    let mut p = [F::zero(); K];
    matrix
        .x
        .rows()
        .into_iter()
        .zip(&matrix.labels)
        .map(|(row, l)| {
            predict(row, &mut p);
            -2.0 * p[l.index()].as_f64().max(1e-300).ln()
        })
        .sum()
}

fn check_rows<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<(), LearnError> {
    config.validate()?;
    let n = matrix.nrows();
    if matrix.labels.len() != n {
        return Err(LearnError::InsufficientData(
            "label vector does not match the row count".into(),
        ));
    }
    if n == 0 || n < 2 * config.min_samples_leaf {
        return Err(LearnError::InsufficientData(format!(
            "{n} rows for min_samples_leaf {}",
            config.min_samples_leaf
        )));
    }
    Ok(())
}

pub(crate) fn forest_probabilities<F: Scalar>(trees: &[Tree<F>], x: ArrayView1<'_, F>, out: &mut [F; K]) {
    let mut leaf = [F::zero(); K];
    out.iter_mut().for_each(|v| *v = F::zero());
    for t in trees {
        t.leaf_distribution(x, &mut leaf);
        for (o, &v) in out.iter_mut().zip(&leaf) {
            *o += v;
        }
    }
    let n = F::from_count(trees.len());
    out.iter_mut().for_each(|v| *v /= n);
}

/// Bagged CART trees with ⌈√d⌉ candidate features per split (unless
/// configured otherwise). Tree `t` draws from the ChaCha8 stream `t` of
/// `config.seed`, so results do not depend on thread scheduling.
pub fn fit_forest<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    let started = Instant::now();
    check_rows(matrix, config)?;
    let n = matrix.nrows();
    let d = matrix.ncols();
    let mtry = config
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));
    let params = GrowParams {
        max_depth: config.max_depth,
        min_leaf: config.min_samples_leaf,
        min_gain: config.min_gain,
        max_features: Some(mtry),
    };
    let y = matrix.label_indices();
    let x = matrix.x.view();
    let trees: Vec<Tree<F>> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let rows: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_classification(x, &y, rows, params, Some(&mut rng))
        })
        .collect();
    let objective = training_deviance(matrix, |row, p| forest_probabilities(&trees, row, p));
    let meta = TrainingMeta {
        iterations: trees.len(),
        objective,
        seconds: None,
        flags: Vec::new(),
        effective_lambda: 0.0,
        training_mae: None,
        n_train: n,
    };
    Ok(ModelArtifact::assemble(
        ModelKind::Forest,
        matrix,
        Params::Forest { trees },
        meta,
        config,
        started,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtRound<F> {
    /// Multiplier applied to this round's tree outputs (shrinkage, halved
    /// when the full step would raise the training deviance).
    pub step: F,
    /// One regression tree per class, in label order.
    pub trees: Vec<Tree<F>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams<F> {
    /// Starting scores: smoothed log class frequencies.
    pub initial: Vec<F>,
    pub rounds: Vec<GbtRound<F>>,
}

impl<F: Scalar> GbtParams<F> {
    pub(crate) fn scores(&self, x: ArrayView1<'_, F>, out: &mut [F; K]) {
        out.copy_from_slice(&self.initial);
        for round in &self.rounds {
            for (o, t) in out.iter_mut().zip(&round.trees) {
                *o += round.step * t.leaf_values(x)[0];
            }
        }
    }

    pub(crate) fn probabilities(&self, x: ArrayView1<'_, F>, out: &mut [F; K]) {
        self.scores(x, out);
        softmax_in_place(&mut out[..]);
    }
}

fn score_deviance<F: Scalar>(scores: &Array2<F>, y: &[usize]) -> F {
    scores
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &c)| {
            let lse = log_sum_exp(row.as_slice().expect("row-major scores"));
            F::lit(2.0) * (lse - row[c])
        })
        .sum()
}

/// Multinomial deviance boosting with one least-squares tree per class per
/// round and Newton leaf values.
pub fn fit_gbt<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    let started = Instant::now();
    check_rows(matrix, config)?;
    let n = matrix.nrows();
    let y = matrix.label_indices();
    let x = matrix.x.view();
    let mut counts = [0usize; K];
    for &c in &y {
        counts[c] += 1;
    }
    let denom = F::from_count(n) + F::lit(0.5 * K as f64);
    let initial: Vec<F> = counts
        .iter()
        .map(|&c| ((F::from_count(c) + F::lit(0.5)) / denom).ln())
        .collect();
    let mut scores = Array2::<F>::zeros((n, K));
    for mut row in scores.rows_mut() {
        row.iter_mut().zip(&initial).for_each(|(s, &v)| *s = v);
    }
    let mut deviance = score_deviance(&scores, &y);
    let shrinkage = F::lit(config.shrinkage);
    let factor = F::from_count(K - 1) / F::from_count(K);
    let mut rounds = Vec::new();
    let mut flags = Vec::new();

    for _ in 0..config.gbt_rounds {
        let mut probs = scores.clone();
        for mut row in probs.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("row-major"));
        }
        let trees: Vec<Tree<F>> = (0..K)
            .into_par_iter()
            .map(|k| {
                let r: Vec<F> = (0..n)
                    .map(|i| if y[i] == k { F::one() } else { F::zero() } - probs[[i, k]])
                    .collect();
                let leaf = |rows: &[usize]| {
                    let num: F = rows.iter().map(|&i| r[i]).sum();
                    let den: F = rows.iter().map(|&i| r[i].abs() * (F::one() - r[i].abs())).sum();
                    if den > F::epsilon() {
                        factor * num / den
                    } else {
                        F::zero()
                    }
                };
                grow_regression(x, &r, config.gbt_depth, config.min_samples_leaf, &leaf)
            })
            .collect();
        let mut update = Array2::<F>::zeros((n, K));
        for (i, row) in x.rows().into_iter().enumerate() {
            for (k, t) in trees.iter().enumerate() {
                update[[i, k]] = t.leaf_values(row)[0];
            }
        }
        let mut step = shrinkage;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = &scores + &update.mapv(|u| u * step);
            let d = score_deviance(&trial, &y);
            if d <= deviance {
                accepted = Some((trial, d));
                break;
            }
            step = step / F::lit(2.0);
            if !flags.contains(&FitFlag::ShrunkRounds) {
                flags.push(FitFlag::ShrunkRounds);
            }
        }
        let Some((trial, d)) = accepted else {
            // the ensemble can no longer lower the training deviance
            break;
        };
        assert!(d <= deviance, "training deviance increased");
        scores = trial;
        deviance = d;
        rounds.push(GbtRound { step, trees });
    }

    let meta = TrainingMeta {
        iterations: rounds.len(),
        objective: deviance.as_f64(),
        seconds: None,
        flags,
        effective_lambda: 0.0,
        training_mae: None,
        n_train: n,
    };
    Ok(ModelArtifact::assemble(
        ModelKind::Gbt,
        matrix,
        Params::Gbt(GbtParams { initial, rounds }),
        meta,
        config,
        started,
    ))
}
