//! Classifiers for the six discontinuation outcomes and the treatment-length
//! regressor, sharing one artifact format.

mod ensemble;
mod glm;
mod length;
mod tree;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::OutcomeLabel;
use crate::preprocess::{EncodedRow, FeatureMatrix, FeatureSchema};
use crate::scalar::{argmax, Scalar};

pub use ensemble::{fit_forest, fit_gbt, multinomial_deviance, GbtParams, GbtRound};
pub use glm::{fit_glm, fit_logreg, penalized_log_likelihood};
pub use length::fit_length_glm;
pub use tree::{export_tree, fit_tree, parse_tree_text, Node, Tree, TreeExport};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("schema fingerprint mismatch: model expects {expected}, row has {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("wrong model kind: expected {expected}, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("unsupported model format version {found}")]
    VersionMismatch { found: u64 },
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("cannot parse tree text at line {line}: {reason}")]
    TreeParse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LearnError {
    pub fn name(&self) -> &'static str {
        match self {
            LearnError::DegenerateLabels => "DegenerateLabels",
            LearnError::InsufficientData(_) => "InsufficientData",
            LearnError::InvalidConfig(_) => "InvalidConfig",
            LearnError::FingerprintMismatch { .. } => "FingerprintMismatch",
            LearnError::WrongKind { .. } => "WrongKind",
            LearnError::VersionMismatch { .. } => "VersionMismatch",
            LearnError::CorruptFile(_) => "CorruptFile",
            LearnError::TreeParse { .. } => "TreeParse",
            LearnError::Io(_) => "Io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Glm,
    Logreg,
    Tree,
    Forest,
    Gbt,
    LengthGlm,
}

impl ModelKind {
    pub const CLASSIFIERS: [ModelKind; 5] = [
        ModelKind::Glm,
        ModelKind::Logreg,
        ModelKind::Tree,
        ModelKind::Forest,
        ModelKind::Gbt,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ModelKind::Glm => "glm",
            ModelKind::Logreg => "logreg",
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
            ModelKind::Gbt => "gbt",
            ModelKind::LengthGlm => "length_glm",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Glm => "GLM",
            ModelKind::Logreg => "Logistic Regression",
            ModelKind::Tree => "Decision Tree",
            ModelKind::Forest => "Random Forest",
            ModelKind::Gbt => "Gradient Boosted Trees",
            ModelKind::LengthGlm => "Length GLM",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != ModelKind::LengthGlm
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ModelKind::Glm,
            ModelKind::Logreg,
            ModelKind::Tree,
            ModelKind::Forest,
            ModelKind::Gbt,
            ModelKind::LengthGlm,
        ]
        .into_iter()
        .find(|k| k.token() == s)
        .ok_or_else(|| format!("unknown model kind `{s}`"))
    }
}

/// Hyperparameters for every learner; fields a learner does not use are
/// ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Ridge penalty on slopes (never on intercepts).
    pub lambda: f64,
    pub max_iterations: usize,
    /// Relative change of the objective that ends IRLS.
    pub tolerance: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_gain: f64,
    pub n_trees: usize,
    /// Candidate features per split; `None` means ⌈√d⌉.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub gbt_rounds: usize,
    pub shrinkage: f64,
    pub gbt_depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Glm,
            lambda: 1e-4,
            max_iterations: 100,
            tolerance: 1e-8,
            max_depth: 5,
            min_samples_leaf: 10,
            min_gain: 1e-7,
            n_trees: 200,
            max_features: None,
            bootstrap: true,
            gbt_rounds: 200,
            shrinkage: 0.1,
            gbt_depth: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: &str| Err(LearnError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be > 0");
        }
        if self.max_depth == 0 && self.kind == ModelKind::Forest {
            return bad("forest trees need max_depth >= 1");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be >= 1");
        }
        if !(self.min_gain >= 0.0) {
            return bad("min_gain must be >= 0");
        }
        if self.n_trees == 0 {
            return bad("n_trees must be >= 1");
        }
        if self.max_features == Some(0) {
            return bad("max_features must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return bad("shrinkage must lie in [0, 1]");
        }
        if self.gbt_depth == 0 {
            return bad("gbt_depth must be >= 1");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex16(&Sha256::digest(json.as_bytes()))
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFlag {
    /// Iteration limit reached while the objective was still moving.
    NonConvergence,
    /// The Newton system was singular; the ridge penalty was raised.
    SingularSystem,
    /// A boosting round could not lower the training deviance and was
    /// shrunk or skipped.
    ShrunkRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    /// Penalized log-likelihood for glm/logreg, training deviance for the
    /// tree learners, residual sum of squares for the length model.
    pub objective: f64,
    /// Wall-clock fit time; `None` when timing is suppressed.
    pub seconds: Option<f64>,
    #[serde(default)]
    pub flags: Vec<FitFlag>,
    /// Ridge penalty actually used.
    #[serde(default)]
    pub effective_lambda: f64,
    /// Training-set mean absolute error (length model only).
    #[serde(default)]
    pub training_mae: Option<f64>,
    pub n_train: usize,
}

impl TrainingMeta {
    pub fn has_flag(&self, flag: FitFlag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Params<F> {
    /// One row per class in label order, each `[intercept, slopes...]`.
    Linear { coefficients: Vec<Vec<F>> },
    Tree { tree: Tree<F> },
    Forest { trees: Vec<Tree<F>> },
    Gbt(GbtParams<F>),
    /// `[intercept, slopes...]`, response in months.
    Length { coefficients: Vec<F> },
}

/// A fitted model with its encoding schema and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact<F> {
    pub format_version: u32,
    pub kind: ModelKind,
    pub schema_fingerprint: String,
    /// Class order of the probability vector; empty for the regressor.
    pub classes: Vec<OutcomeLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_units: Option<String>,
    pub params: Params<F>,
    pub training_meta: TrainingMeta,
    pub config: ModelConfig,
    pub config_hash: String,
    pub schema: FeatureSchema,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<F> {
    Class {
        probabilities: [F; OutcomeLabel::COUNT],
        label: OutcomeLabel,
    },
    Length {
        months: F,
    },
}

impl<F: Scalar> ModelArtifact<F> {
    pub(crate) fn assemble(
        kind: ModelKind,
        matrix: &FeatureMatrix<F>,
        params: Params<F>,
        mut meta: TrainingMeta,
        config: &ModelConfig,
        started: Instant,
    ) -> Self {
        meta.seconds = Some(started.elapsed().as_secs_f64());
        let (classes, response_units) = if kind.is_classifier() {
            (OutcomeLabel::ALL.to_vec(), None)
        } else {
            (Vec::new(), Some("months".to_string()))
        };
        let config = ModelConfig {
            kind,
            ..config.clone()
        };
        Self {
            format_version: FORMAT_VERSION,
            kind,
            schema_fingerprint: matrix.schema.fingerprint.clone(),
            classes,
            response_units,
            params,
            training_meta: meta,
            config_hash: config.hash(),
            config,
            schema: (*matrix.schema).clone(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    fn check_fingerprint(&self, fingerprint: &str) -> Result<(), LearnError> {
        if fingerprint != self.schema_fingerprint {
            return Err(LearnError::FingerprintMismatch {
                expected: self.schema_fingerprint.clone(),
                found: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    fn wrong_kind(&self, expected: &str) -> LearnError {
        LearnError::WrongKind {
            expected: expected.to_string(),
            found: self.kind.token().to_string(),
        }
    }

    /// Class probabilities for a row already known to match the schema.
    pub fn probabilities(&self, x: ArrayView1<'_, F>) -> Result<[F; OutcomeLabel::COUNT], LearnError> {
        let mut p = [F::zero(); OutcomeLabel::COUNT];
        match &self.params {
            Params::Linear { coefficients } => match self.kind {
                ModelKind::Glm => glm::softmax_probabilities(coefficients, x, &mut p),
                _ => glm::ovr_probabilities(coefficients, x, &mut p),
            },
            Params::Tree { tree } => tree.leaf_distribution(x, &mut p),
            Params::Forest { trees } => ensemble::forest_probabilities(trees, x, &mut p),
            Params::Gbt(g) => g.probabilities(x, &mut p),
            Params::Length { .. } => return Err(self.wrong_kind("classifier")),
        }
        Ok(p)
    }

    /// Predicted months (clamped at zero) for a row known to match the schema.
    pub fn months(&self, x: ArrayView1<'_, F>) -> Result<F, LearnError> {
        match &self.params {
            Params::Length { coefficients } => Ok(length::predict_months(coefficients, x)),
            _ => Err(self.wrong_kind("length_glm")),
        }
    }

    /// Probability matrix (rows × 6) for an encoded matrix.
    pub fn predict_proba_matrix(&self, matrix: &FeatureMatrix<F>) -> Result<Array2<F>, LearnError> {
        self.check_fingerprint(matrix.fingerprint())?;
        let mut out = Array2::<F>::zeros((matrix.nrows(), OutcomeLabel::COUNT));
        for (i, row) in matrix.x.rows().into_iter().enumerate() {
            let p = self.probabilities(row)?;
            out.row_mut(i).assign(&ArrayView1::from(&p[..]));
        }
        Ok(out)
    }

    pub fn predict_length_matrix(&self, matrix: &FeatureMatrix<F>) -> Result<Array1<F>, LearnError> {
        self.check_fingerprint(matrix.fingerprint())?;
        matrix.x.rows().into_iter().map(|r| self.months(r)).collect()
    }
}

/// Predicts one encoded row.
pub fn predict<F: Scalar>(artifact: &ModelArtifact<F>, row: &EncodedRow<F>) -> Result<Prediction<F>, LearnError> {
    artifact.check_fingerprint(&row.fingerprint)?;
    if row.values.len() != artifact.n_features() {
        return Err(LearnError::FingerprintMismatch {
            expected: artifact.schema_fingerprint.clone(),
            found: format!("{} columns", row.values.len()),
        });
    }
    if artifact.kind.is_classifier() {
        let probabilities = artifact.probabilities(row.values.view())?;
        let label = OutcomeLabel::ALL[argmax(&probabilities)];
        Ok(Prediction::Class {
            probabilities,
            label,
        })
    } else {
        Ok(Prediction::Length {
            months: artifact.months(row.values.view())?,
        })
    }
}

/// Fits the learner named by `config.kind`.
pub fn fit<F: Scalar>(matrix: &FeatureMatrix<F>, config: &ModelConfig) -> Result<ModelArtifact<F>, LearnError> {
    match config.kind {
        ModelKind::Glm => fit_glm(matrix, config),
        ModelKind::Logreg => fit_logreg(matrix, config),
        ModelKind::Tree => fit_tree(matrix, config),
        ModelKind::Forest => fit_forest(matrix, config),
        ModelKind::Gbt => fit_gbt(matrix, config),
        ModelKind::LengthGlm => fit_length_glm(matrix, config),
    }
}

pub(crate) fn check_classification_input<F: Scalar>(matrix: &FeatureMatrix<F>) -> Result<(), LearnError> {
    if matrix.nrows() == 0 {
        return Err(LearnError::InsufficientData("no training rows".into()));
    }
    if matrix.labels.len() != matrix.nrows() {
        return Err(LearnError::InsufficientData(
            "label vector does not match the row count".into(),
        ));
    }
    let first = matrix.labels[0];
    if matrix.labels.iter().all(|&l| l == first) {
        return Err(LearnError::DegenerateLabels);
    }
    Ok(())
}

pub fn save_model<F: Scalar>(artifact: &ModelArtifact<F>, path: impl AsRef<Path>) -> Result<(), LearnError> {
    fs::write(path, to_json(artifact))?;
    Ok(())
}

pub fn to_json<F: Scalar>(artifact: &ModelArtifact<F>) -> String {
    let mut s = serde_json::to_string_pretty(artifact).expect("artifact serializes");
    s.push('\n');
    s
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<ModelArtifact<F>, LearnError> {
    from_json(&fs::read_to_string(path)?)
}

pub fn from_json<F: Scalar>(text: &str) -> Result<ModelArtifact<F>, LearnError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| LearnError::CorruptFile(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| LearnError::CorruptFile("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(LearnError::VersionMismatch { found: version });
    }
    let artifact: ModelArtifact<F> =
        serde_json::from_str(text).map_err(|e| LearnError::CorruptFile(e.to_string()))?;
    artifact
        .schema
        .verify()
        .map_err(|e| LearnError::CorruptFile(e.to_string()))?;
    if artifact.schema.fingerprint != artifact.schema_fingerprint {
        return Err(LearnError::CorruptFile(
            "schema_fingerprint disagrees with the embedded schema".into(),
        ));
    }
    Ok(artifact)
}


#[cfg(test)]
mod tests {
    use super::testdata::softmax_data;
    use super::*;

    #[test]
    fn config_defaults_and_hash() {
        let c = ModelConfig::default();
        assert_eq!(c.lambda, 1e-4);
        assert_eq!((c.max_depth, c.min_samples_leaf, c.n_trees, c.gbt_rounds, c.gbt_depth), (5, 10, 200, 200, 3));
        assert_eq!(c.hash(), ModelConfig::default().hash());
        assert_ne!(c.hash(), ModelConfig::new(ModelKind::Tree).hash());
        assert!(ModelConfig { shrinkage: 2.0, ..c }.validate().is_err());
    }

    #[test]
    fn every_classifier_outputs_a_simplex() {
        let m = softmax_data(120, 3, 4, 1);
        for kind in ModelKind::CLASSIFIERS {
            let cfg = ModelConfig {
                n_trees: 10,
                gbt_rounds: 10,
                min_samples_leaf: 3,
                ..ModelConfig::new(kind)
            };
            let a = fit(&m, &cfg).unwrap();
            let p = a.predict_proba_matrix(&m).unwrap();
            for row in p.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-9, "{kind}: {s}");
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let m = softmax_data(60, 2, 2, 2);
        let a = fit_glm(&m, &ModelConfig::default()).unwrap();
        let other = FeatureMatrix::from_raw(m.x.clone(), m.labels.clone(), vec![], &["a", "b"]).unwrap();
        assert!(matches!(
            predict(&a, &other.row(0)),
            Err(LearnError::FingerprintMismatch { .. })
        ));
        assert!(predict(&a, &m.row(0)).is_ok());
    }

    #[test]
    fn zero_glm_is_uniform_and_ties_pick_lowest_label() {
        let m = softmax_data(40, 2, 3, 3);
        let mut a = fit_glm(&m, &ModelConfig::default()).unwrap();
        a.params = Params::Linear {
            coefficients: vec![vec![0.0; 3]; 6],
        };
        match predict(&a, &m.row(0)).unwrap() {
            Prediction::Class { probabilities, label } => {
                for p in probabilities {
                    assert!((p - 1.0 / 6.0).abs() < 1e-15);
                }
                assert_eq!(label, OutcomeLabel::AdverseEvent);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = softmax_data(80, 3, 3, 4);
        let a = fit_glm(&m, &ModelConfig::default()).unwrap();
        save_model(&a, &path).unwrap();
        let b: ModelArtifact<f64> = load_model(&path).unwrap();
        assert_eq!(a, b);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_model::<f64>(&path), Err(LearnError::CorruptFile(_))));

        let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_model::<f64>(&path),
            Err(LearnError::VersionMismatch { found: 2 })
        ));
    }

    #[test]
    fn model_file_has_documented_top_level_fields() {
        let m = softmax_data(50, 2, 2, 5);
        let a = fit_tree(&m, &ModelConfig { min_samples_leaf: 2, ..ModelConfig::new(ModelKind::Tree) }).unwrap();
        let v: serde_json::Value = serde_json::from_str(&to_json(&a)).unwrap();
        for key in ["format_version", "kind", "schema_fingerprint", "classes", "params", "training_meta"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for key in ["iterations", "objective", "seconds"] {
            assert!(v["training_meta"].get(key).is_some(), "{key}");
        }
        assert_eq!(v["kind"], "tree");
    }
}
