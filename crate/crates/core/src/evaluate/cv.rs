use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bland_altman, confusion_and_accuracy, kfold_split, mean_sd, regression_metrics, roc_auc_ovr, AgreementReport,
    ConfusionMatrix, EvalError, RegressionMetrics, RocCurve,
};
use crate::cohort::{OutcomeLabel, PatientRecord, RocGroup};
use crate::learn::{fit, FitFlag, ModelArtifact, ModelConfig, ModelKind};
use crate::preprocess::{derive_schema, encode, pca_screen_matrix, FeatureMatrix, SchemaMode};
use crate::scalar::{argmax, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaSettings {
    pub variance_threshold: f64,
    pub loading_floor: f64,
}

impl Default for PcaSettings {
    fn default() -> Self {
        Self {
            variance_threshold: 0.95,
            loading_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub mode: SchemaMode,
    /// Screen columns with PCA on each training fold before fitting.
    pub pca: Option<PcaSettings>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 42,
            mode: SchemaMode::Baseline,
            pca: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub accuracy: f64,
    /// Wall clock for schema, encoding, fit and prediction.
    pub seconds: f64,
    pub dropped_columns: Vec<String>,
    pub flags: Vec<FitFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: ModelKind,
    pub k: usize,
    pub seed: u64,
    pub mode: SchemaMode,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Sample SD of the fold accuracies.
    pub sd_accuracy: f64,
    /// Pooled trace / total.
    pub micro_accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Summed fold wall clock.
    pub seconds: f64,
}

impl CvReport {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }
}

/// Cross-validation outputs including out-of-fold probabilities.
#[derive(Debug, Clone)]
pub struct CvRun<F> {
    pub report: CvReport,
    pub folds: Vec<Vec<usize>>,
    pub labels: Vec<OutcomeLabel>,
    /// Row `i` comes from the model that did not see record `i`.
    pub probabilities: Array2<F>,
    pub predictions: Vec<OutcomeLabel>,
    pub models: Vec<ModelArtifact<F>>,
}

impl<F: Scalar> CvRun<F> {
    pub fn roc_curves(&self) -> Result<Vec<RocCurve>, EvalError> {
        RocGroup::ALL
            .iter()
            .map(|&g| roc_auc_ovr(&self.labels, &self.probabilities, g))
            .collect()
    }
}

fn subset(records: &[PatientRecord], rows: &[usize]) -> Vec<PatientRecord> {
    rows.iter().map(|&i| records[i].clone()).collect()
}

fn complement(n: usize, rows: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    rows.iter().for_each(|&i| mask[i] = false);
    (0..n).filter(|&i| mask[i]).collect()
}

/// Derives the schema from `train` only, optionally screens it with PCA on
/// the encoded training rows, and encodes both sides.
pub(crate) fn prepare_split<F: Scalar>(
    train: &[PatientRecord],
    test: &[PatientRecord],
    mode: SchemaMode,
    pca: Option<PcaSettings>,
) -> Result<(FeatureMatrix<F>, FeatureMatrix<F>, Vec<String>), EvalError> {
    let mut schema = Arc::new(derive_schema(train, mode)?);
    let mut dropped = Vec::new();
    if let Some(settings) = pca {
        let m = encode::<F>(train, &schema)?;
        let report = pca_screen_matrix(&m, F::lit(settings.variance_threshold), F::lit(settings.loading_floor))?;
        if !report.dropped.is_empty() && report.dropped.len() < schema.len() {
            schema = Arc::new(schema.without_columns(&report.dropped));
            dropped = report.dropped;
        }
    }
    Ok((encode(train, &schema)?, encode(test, &schema)?, dropped))
}

fn in_fold<T>(fold: usize, r: Result<T, impl Into<EvalError>>) -> Result<T, EvalError> {
    r.map_err(|e| EvalError::Fold {
        fold,
        source: Box::new(e.into()),
    })
}

fn predicted_labels<F: Scalar>(probabilities: &Array2<F>) -> Vec<OutcomeLabel> {
    probabilities
        .rows()
        .into_iter()
        .map(|r| OutcomeLabel::ALL[argmax(r.as_slice().expect("row-major"))])
        .collect()
}

/// k-fold cross-validation of a classifier; each fold derives its own
/// schema from its training rows.
pub fn cross_validate<F: Scalar>(
    records: &[PatientRecord],
    config: &ModelConfig,
    options: &CvOptions,
) -> Result<CvRun<F>, EvalError> {
    if !config.kind.is_classifier() {
        return Err(EvalError::InvalidArgument(format!("{} is not a classifier", config.kind)));
    }
    let n = records.len();
    let folds = kfold_split(n, options.k, options.seed)?;
    let mut probabilities = Array2::<F>::zeros((n, OutcomeLabel::COUNT));
    let mut results = Vec::with_capacity(folds.len());
    let mut models = Vec::with_capacity(folds.len());
    let mut pooled = ConfusionMatrix::default();
    for (f, test_rows) in folds.iter().enumerate() {
        let started = Instant::now();
        let train_rows = complement(n, test_rows);
        let test = subset(records, test_rows);
        let (train_m, test_m, dropped) =
            prepare_split::<F>(&subset(records, &train_rows), &test, options.mode, options.pca)
                .map_err(|e| EvalError::Fold { fold: f, source: Box::new(e) })?;
        let model = in_fold(f, fit(&train_m, config))?;
        let probs = in_fold(f, model.predict_proba_matrix(&test_m))?;
        let seconds = started.elapsed().as_secs_f64();
        let predicted = predicted_labels(&probs);
        let truth: Vec<OutcomeLabel> = test.iter().map(|r| r.outcome).collect();
        let (cm, accuracy) = in_fold(f, confusion_and_accuracy(&truth, &predicted))?;
        pooled.merge(&cm);
        for (j, &row) in test_rows.iter().enumerate() {
            probabilities.row_mut(row).assign(&probs.row(j));
        }
        results.push(FoldResult {
            fold: f,
            n_train: train_rows.len(),
            n_test: test_rows.len(),
            accuracy,
            seconds,
            dropped_columns: dropped,
            flags: model.training_meta.flags.clone(),
        });
        models.push(model);
    }
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
    let report = CvReport {
        kind: config.kind,
        k: options.k,
        seed: options.seed,
        mode: options.mode,
        mean_accuracy,
        sd_accuracy,
        micro_accuracy: pooled.micro_accuracy(),
        confusion: pooled,
        seconds: results.iter().map(|r| r.seconds).sum(),
        folds: results,
    };
    Ok(CvRun {
        report,
        folds,
        labels: records.iter().map(|r| r.outcome).collect(),
        predictions: predicted_labels(&probabilities),
        probabilities,
        models,
    })
}

#[derive(Debug, Clone)]
pub struct LengthCvRun<F> {
    pub folds: Vec<Vec<usize>>,
    pub fold_mae: Vec<f64>,
    pub actual: Vec<f64>,
    /// Out-of-fold predictions in months.
    pub predicted: Vec<f64>,
    pub metrics: RegressionMetrics,
    pub agreement: AgreementReport,
    pub seconds: f64,
    pub models: Vec<ModelArtifact<F>>,
}

fn check_length_setup(config: &ModelConfig, mode: SchemaMode) -> Result<(), EvalError> {
    if config.kind != ModelKind::LengthGlm {
        return Err(EvalError::InvalidArgument("length evaluation needs kind length_glm".into()));
    }
    if mode != SchemaMode::Baseline {
        return Err(EvalError::InvalidArgument(
            "treatment length cannot be a predictor of itself; use baseline mode".into(),
        ));
    }
    Ok(())
}

fn lengths_of<F: Scalar>(m: &FeatureMatrix<F>) -> Vec<f64> {
    m.lengths.iter().map(|v| v.as_f64()).collect()
}

pub fn cross_validate_length<F: Scalar>(
    records: &[PatientRecord],
    config: &ModelConfig,
    options: &CvOptions,
) -> Result<LengthCvRun<F>, EvalError> {
    check_length_setup(config, options.mode)?;
    let n = records.len();
    let folds = kfold_split(n, options.k, options.seed)?;
    let mut predicted = vec![0.0; n];
    let mut fold_mae = Vec::new();
    let mut models = Vec::new();
    let mut seconds = 0.0;
    for (f, test_rows) in folds.iter().enumerate() {
        let started = Instant::now();
        let train_rows = complement(n, test_rows);
        let (train_m, test_m, _) =
            prepare_split::<F>(&subset(records, &train_rows), &subset(records, test_rows), options.mode, options.pca)
                .map_err(|e| EvalError::Fold { fold: f, source: Box::new(e) })?;
        let model = in_fold(f, fit(&train_m, config))?;
        let months = in_fold(f, model.predict_length_matrix(&test_m))?;
        seconds += started.elapsed().as_secs_f64();
        let actual = lengths_of(&test_m);
        let mut err = 0.0;
        for ((&row, m), a) in test_rows.iter().zip(months.iter()).zip(&actual) {
            predicted[row] = m.as_f64();
            err += (a - m.as_f64()).abs();
        }
        fold_mae.push(err / actual.len() as f64);
        models.push(model);
    }
    let actual: Vec<f64> = records.iter().map(|r| r.treatment_length_months).collect();
    Ok(LengthCvRun {
        metrics: regression_metrics(&actual, &predicted)?,
        agreement: bland_altman(&actual, &predicted)?,
        folds,
        fold_mae,
        actual,
        predicted,
        seconds,
        models,
    })
}

/// Seeded split of `0..n` into `(train, test)` with `n_test` test rows,
/// both sorted ascending.
pub fn holdout_split(n: usize, n_test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if n_test == 0 || n_test >= n {
        return Err(EvalError::InvalidArgument(format!(
            "test size {n_test} must lie in 1..{n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct HoldoutRun<F> {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub probabilities: Array2<F>,
    pub predictions: Vec<OutcomeLabel>,
    pub labels: Vec<OutcomeLabel>,
    pub model: ModelArtifact<F>,
    pub seconds: f64,
}

/// Single train/test split, fitted on the training part only.
pub fn evaluate_holdout<F: Scalar>(
    records: &[PatientRecord],
    config: &ModelConfig,
    n_test: usize,
    options: &CvOptions,
) -> Result<HoldoutRun<F>, EvalError> {
    let started = Instant::now();
    let (train_rows, test_rows) = holdout_split(records.len(), n_test, options.seed)?;
    let test = subset(records, &test_rows);
    let (train_m, test_m, _) = prepare_split::<F>(&subset(records, &train_rows), &test, options.mode, options.pca)?;
    let model = fit(&train_m, config)?;
    let probabilities = model.predict_proba_matrix(&test_m)?;
    let predictions = predicted_labels(&probabilities);
    let labels: Vec<OutcomeLabel> = test.iter().map(|r| r.outcome).collect();
    let (confusion, accuracy) = confusion_and_accuracy(&labels, &predictions)?;
    Ok(HoldoutRun {
        train_rows,
        test_rows,
        confusion,
        accuracy,
        probabilities,
        predictions,
        labels,
        model,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct LengthHoldoutRun<F> {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
    pub metrics: RegressionMetrics,
    pub agreement: AgreementReport,
    pub model: ModelArtifact<F>,
}

pub fn evaluate_length_holdout<F: Scalar>(
    records: &[PatientRecord],
    config: &ModelConfig,
    n_test: usize,
    seed: u64,
) -> Result<LengthHoldoutRun<F>, EvalError> {
    check_length_setup(config, SchemaMode::Baseline)?;
    let (train_rows, test_rows) = holdout_split(records.len(), n_test, seed)?;
    let (train_m, test_m, _) = prepare_split::<F>(
        &subset(records, &train_rows),
        &subset(records, &test_rows),
        SchemaMode::Baseline,
        None,
    )?;
    let model = fit(&train_m, config)?;
    let predicted: Vec<f64> = model
        .predict_length_matrix(&test_m)?
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let actual = lengths_of(&test_m);
    Ok(LengthHoldoutRun {
        metrics: regression_metrics(&actual, &predicted)?,
        agreement: bland_altman(&actual, &predicted)?,
        train_rows,
        test_rows,
        actual,
        predicted,
        model,
    })
}
