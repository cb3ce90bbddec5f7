//! Records to design matrix: typed encoding, one-hot levels, missing-value
//! indicators, fold-local standardization and PCA feature screening.

mod pca;

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{Feature, FeatureKind, FeatureValue, OutcomeLabel, Patient, PatientRecord};
use crate::scalar::Scalar;

pub use pca::{pca_screen, pca_screen_matrix, PcaScreenReport};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl PreprocessError {
    pub fn name(&self) -> &'static str {
        match self {
            PreprocessError::EmptyCohort => "EmptyCohort",
            PreprocessError::SchemaMismatch(_) => "SchemaMismatch",
            PreprocessError::DegenerateCovariance(_) => "DegenerateCovariance",
            PreprocessError::InvalidArgument(_) => "InvalidArgument",
        }
    }
}

/// Whether treatment length is available as a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaMode {
    /// Only what is known when therapy starts.
    #[default]
    Baseline,
    /// Adds the observed treatment length as a predictor.
    Retrospective,
}

impl std::str::FromStr for SchemaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(SchemaMode::Baseline),
            "retrospective" => Ok(SchemaMode::Retrospective),
            other => Err(format!("unknown schema mode `{other}`")),
        }
    }
}

/// Where an encoded column's value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnSource {
    Feature(Feature),
    TreatmentLength,
    /// Column of an ad-hoc matrix built with [`FeatureMatrix::from_raw`].
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    OneHot { level: usize },
    MissingIndicator,
}

/// One encoded column with the statistics learned from the training rows.
///
/// For numeric columns `mean`/`sd` standardize the value; for one-hot and
/// indicator columns `mean` is the training frequency and `sd` is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub source: ColumnSource,
    pub kind: ColumnKind,
    pub mean: f64,
    pub sd: f64,
    /// Zero training variance; `sd` was forced to 1.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub mode: SchemaMode,
    pub columns: Vec<Column>,
    pub fingerprint: String,
}

fn fingerprint_of(columns: &[Column]) -> String {
    let mut hasher = Sha256::new();
    for c in columns {
        let kind = match c.kind {
            ColumnKind::Numeric => "numeric".to_string(),
            ColumnKind::OneHot { level } => format!("one_hot:{level}"),
            ColumnKind::MissingIndicator => "missing".to_string(),
        };
        hasher.update(c.name.as_bytes());
        hasher.update(b"|");
        hasher.update(kind.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn missing_name(feature: &str) -> String {
    format!("{feature}__missing")
}

/// Options for [`derive_schema_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaOptions {
    pub mode: SchemaMode,
    /// Source features to encode; kept in registry order regardless of the
    /// order given here.
    pub features: Vec<Feature>,
}

impl SchemaOptions {
    pub fn new(mode: SchemaMode) -> Self {
        Self {
            mode,
            features: Feature::ALL.to_vec(),
        }
    }
}

/// Schema over all baseline features.
pub fn derive_schema(records: &[PatientRecord], mode: SchemaMode) -> Result<FeatureSchema, PreprocessError> {
    derive_schema_with(records, &SchemaOptions::new(mode))
}

pub fn derive_schema_with(
    records: &[PatientRecord],
    options: &SchemaOptions,
) -> Result<FeatureSchema, PreprocessError> {
    if records.is_empty() {
        return Err(PreprocessError::EmptyCohort);
    }
    let mut columns = Vec::new();
    for feature in Feature::ALL.into_iter().filter(|f| options.features.contains(f)) {
        let name = feature.name();
        let values: Vec<Option<FeatureValue>> =
            records.iter().map(|r| r.patient.get(feature)).collect();
        match feature.kind() {
            FeatureKind::Numeric | FeatureKind::Boolean => {
                let present: Vec<f64> = values.iter().flatten().map(numeric).collect();
                columns.push(numeric_column(name.to_string(), ColumnSource::Feature(feature), &present));
            }
            FeatureKind::Categorical => {
                for (level, token) in feature.levels().iter().enumerate() {
                    let hits = values
                        .iter()
                        .filter(|v| matches!(v, Some(FeatureValue::Level(l)) if *l == level))
                        .count();
                    columns.push(Column {
                        name: format!("{name}={token}"),
                        source: ColumnSource::Feature(feature),
                        kind: ColumnKind::OneHot { level },
                        mean: hits as f64 / records.len() as f64,
                        sd: 1.0,
                        constant: false,
                    });
                }
            }
        }
        if feature.is_optional() {
            let missing = values.iter().filter(|v| v.is_none()).count();
            columns.push(Column {
                name: missing_name(name),
                source: ColumnSource::Feature(feature),
                kind: ColumnKind::MissingIndicator,
                mean: missing as f64 / records.len() as f64,
                sd: 1.0,
                constant: false,
            });
        }
    }
    if options.mode == SchemaMode::Retrospective {
        let lengths: Vec<f64> = records.iter().map(|r| r.treatment_length_months).collect();
        columns.push(numeric_column(
            "treatment_length_months".to_string(),
            ColumnSource::TreatmentLength,
            &lengths,
        ));
    }
    let fingerprint = fingerprint_of(&columns);
    Ok(FeatureSchema {
        mode: options.mode,
        columns,
        fingerprint,
    })
}

fn numeric(v: &FeatureValue) -> f64 {
    match *v {
        FeatureValue::Number(x) => x,
        FeatureValue::Flag(b) => f64::from(u8::from(b)),
        FeatureValue::Level(l) => l as f64,
    }
}

fn numeric_column(name: String, source: ColumnSource, present: &[f64]) -> Column {
    let n = present.len();
    let mean = if n == 0 {
        0.0
    } else {
        present.iter().sum::<f64>() / n as f64
    };
    let sd = if n < 2 {
        0.0
    } else {
        (present.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let constant = !(sd > 0.0);
    Column {
        name,
        source,
        kind: ColumnKind::Numeric,
        mean,
        sd: if constant { 1.0 } else { sd },
        constant,
    }
}

impl FeatureSchema {
    /// All-numeric identity schema for matrices that do not come from
    /// patient records.
    pub fn raw(names: &[impl AsRef<str>]) -> Self {
        let columns: Vec<Column> = names
            .iter()
            .map(|n| Column {
                name: n.as_ref().to_string(),
                source: ColumnSource::Raw,
                kind: ColumnKind::Numeric,
                mean: 0.0,
                sd: 1.0,
                constant: false,
            })
            .collect();
        let fingerprint = fingerprint_of(&columns);
        Self {
            mode: SchemaMode::Baseline,
            columns,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    /// Source features present in the schema, in registry order.
    pub fn features(&self) -> Vec<Feature> {
        let mut out: Vec<Feature> = Vec::new();
        for c in &self.columns {
            if let ColumnSource::Feature(f) = c.source {
                if !out.contains(&f) {
                    out.push(f);
                }
            }
        }
        out
    }

    pub fn constant_columns(&self) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.constant)
            .map(|c| c.name.as_str())
            .collect()
    }

    /// Checks that the stored fingerprint matches the column list.
    pub fn verify(&self) -> Result<(), PreprocessError> {
        let expected = fingerprint_of(&self.columns);
        if expected != self.fingerprint {
            return Err(PreprocessError::SchemaMismatch(format!(
                "fingerprint {} does not match columns ({expected})",
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// Copy of the schema with the named columns removed.
    pub fn without_columns(&self, names: &[String]) -> Self {
        let columns: Vec<Column> = self
            .columns
            .iter()
            .filter(|c| !names.contains(&c.name))
            .cloned()
            .collect();
        let fingerprint = fingerprint_of(&columns);
        Self {
            mode: self.mode,
            columns,
            fingerprint,
        }
    }

    /// Training-set mean/mode of a feature, used as a reference profile.
    pub fn typical_value(&self, feature: Feature) -> Option<FeatureValue> {
        let cols: Vec<&Column> = self
            .columns
            .iter()
            .filter(|c| c.source == ColumnSource::Feature(feature))
            .collect();
        match feature.kind() {
            FeatureKind::Numeric => cols
                .iter()
                .find(|c| c.kind == ColumnKind::Numeric)
                .map(|c| FeatureValue::Number(c.mean)),
            FeatureKind::Boolean => cols
                .iter()
                .find(|c| c.kind == ColumnKind::Numeric)
                .map(|c| FeatureValue::Flag(c.mean >= 0.5)),
            FeatureKind::Categorical => {
                let mut best: Option<(usize, f64)> = None;
                for c in cols {
                    if let ColumnKind::OneHot { level } = c.kind {
                        if best.is_none_or(|(_, m)| c.mean > m) {
                            best = Some((level, c.mean));
                        }
                    }
                }
                best.map(|(level, _)| FeatureValue::Level(level))
            }
        }
    }

    fn encode_into<F: Scalar>(
        &self,
        patient: &Patient,
        length: Option<f64>,
        out: &mut [F],
    ) -> Result<(), PreprocessError> {
        for (slot, col) in out.iter_mut().zip(&self.columns) {
            let value = match col.source {
                ColumnSource::Raw => {
                    return Err(PreprocessError::SchemaMismatch(format!(
                        "column `{}` has no record source",
                        col.name
                    )))
                }
                ColumnSource::TreatmentLength => match length {
                    Some(v) => Some(FeatureValue::Number(v)),
                    None => {
                        return Err(PreprocessError::SchemaMismatch(
                            "retrospective schema requires treatment_length_months".into(),
                        ))
                    }
                },
                ColumnSource::Feature(f) => patient.get(f),
            };
            let encoded = match (col.kind, value) {
                (ColumnKind::Numeric, Some(v)) => (numeric(&v) - col.mean) / col.sd,
                (ColumnKind::Numeric, None) => 0.0,
                (ColumnKind::OneHot { level }, Some(FeatureValue::Level(l))) => f64::from(u8::from(l == level)),
                (ColumnKind::OneHot { .. }, Some(_)) => {
                    return Err(PreprocessError::SchemaMismatch(format!(
                        "column `{}` expects a categorical source",
                        col.name
                    )))
                }
                (ColumnKind::OneHot { .. }, None) => 0.0,
                (ColumnKind::MissingIndicator, v) => f64::from(u8::from(v.is_none())),
            };
            *slot = F::lit(encoded);
        }
        Ok(())
    }

    /// Encodes one patient without an observed outcome.
    pub fn encode_patient<F: Scalar>(
        &self,
        patient: &Patient,
        treatment_length_months: Option<f64>,
    ) -> Result<EncodedRow<F>, PreprocessError> {
        let mut values = Array1::<F>::zeros(self.len());
        self.encode_into(
            patient,
            treatment_length_months,
            values.as_slice_mut().expect("contiguous"),
        )?;
        Ok(EncodedRow {
            values,
            fingerprint: self.fingerprint.clone(),
        })
    }
}

/// A single encoded row tagged with the schema that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRow<F> {
    pub values: Array1<F>,
    pub fingerprint: String,
}

/// Design matrix with row-aligned outcome labels and treatment lengths.
#[derive(Debug, Clone)]
pub struct FeatureMatrix<F> {
    pub x: Array2<F>,
    pub labels: Vec<OutcomeLabel>,
    pub lengths: Vec<F>,
    pub schema: Arc<FeatureSchema>,
}

impl<F: Scalar> FeatureMatrix<F> {
    /// Wraps an arbitrary numeric matrix with an identity schema.
    pub fn from_raw(
        x: Array2<F>,
        labels: Vec<OutcomeLabel>,
        lengths: Vec<F>,
        names: &[impl AsRef<str>],
    ) -> Result<Self, PreprocessError> {
        if names.len() != x.ncols() {
            return Err(PreprocessError::InvalidArgument(format!(
                "{} column names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if (!labels.is_empty() && labels.len() != x.nrows())
            || (!lengths.is_empty() && lengths.len() != x.nrows())
        {
            return Err(PreprocessError::InvalidArgument(
                "label/length vectors must match the row count".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::InvalidArgument("non-finite entry".into()));
        }
        Ok(Self {
            x,
            labels,
            lengths,
            schema: Arc::new(FeatureSchema::raw(names)),
        })
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn fingerprint(&self) -> &str {
        &self.schema.fingerprint
    }

    pub fn row(&self, i: usize) -> EncodedRow<F> {
        EncodedRow {
            values: self.x.row(i).to_owned(),
            fingerprint: self.schema.fingerprint.clone(),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let x = self.x.select(ndarray::Axis(0), rows);
        Self {
            x,
            labels: pick(&self.labels, rows),
            lengths: pick(&self.lengths, rows),
            schema: Arc::clone(&self.schema),
        }
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

fn pick<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().filter_map(|&i| v.get(i).copied()).collect()
}

/// Encodes records with a schema derived from training rows; never mutates
/// the schema.
pub fn encode<F: Scalar>(
    records: &[PatientRecord],
    schema: &Arc<FeatureSchema>,
) -> Result<FeatureMatrix<F>, PreprocessError> {
    let d = schema.len();
    let mut x = Array2::<F>::zeros((records.len(), d));
    for (mut row, r) in x.rows_mut().into_iter().zip(records) {
        schema.encode_into(
            &r.patient,
            Some(r.treatment_length_months),
            row.as_slice_mut().expect("standard layout"),
        )?;
    }
    Ok(FeatureMatrix {
        x,
        labels: records.iter().map(|r| r.outcome).collect(),
        lengths: records
            .iter()
            .map(|r| F::lit(r.treatment_length_months))
            .collect(),
        schema: Arc::clone(schema),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::record;
    use crate::cohort::{synthesize_cohort, CohortSpec};

    fn cohort(n: usize) -> Vec<PatientRecord> {
        synthesize_cohort(&CohortSpec::registry_like(n, 9)).unwrap()
    }

    #[test]
    fn baseline_columns_include_levels_and_indicators() {
        let schema = derive_schema(&cohort(50), SchemaMode::Baseline).unwrap();
        let names = schema.column_names();
        assert!(names.contains(&"biologic=ustekinumab".to_string()));
        assert!(names.contains(&"weight_kg__missing".to_string()));
        assert!(!names.contains(&"biologic__missing".to_string()));
        assert!(!names.contains(&"treatment_length_months".to_string()));
        // 7 optional features each add an indicator; 2 categoricals expand
        assert_eq!(names.len(), 14 - 2 + 2 + 4 + 7);
        assert_eq!(names[0], "age_years");
    }

    #[test]
    fn retrospective_adds_exactly_treatment_length() {
        let records = cohort(50);
        let base = derive_schema(&records, SchemaMode::Baseline).unwrap();
        let retro = derive_schema(&records, SchemaMode::Retrospective).unwrap();
        let extra: Vec<_> = retro
            .column_names()
            .into_iter()
            .filter(|n| !base.column_names().contains(n))
            .collect();
        assert_eq!(extra, vec!["treatment_length_months".to_string()]);
        assert_ne!(base.fingerprint, retro.fingerprint);
    }

    #[test]
    fn single_record_columns_are_constant() {
        let schema = derive_schema(&[record(OutcomeLabel::Continue)], SchemaMode::Baseline).unwrap();
        for c in schema.columns.iter().filter(|c| c.kind == ColumnKind::Numeric) {
            assert!(c.constant, "{}", c.name);
            assert_eq!(c.sd, 1.0);
        }
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(matches!(
            derive_schema(&[], SchemaMode::Baseline),
            Err(PreprocessError::EmptyCohort)
        ));
    }

    #[test]
    fn absent_weight_imputes_mean_and_sets_indicator() {
        let records = cohort(80);
        let schema = Arc::new(derive_schema(&records, SchemaMode::Baseline).unwrap());
        let mut r = record(OutcomeLabel::Continue);
        r.patient.weight_kg = None;
        let m = encode::<f64>(&[r], &schema).unwrap();
        let w = schema.column_index("weight_kg").unwrap();
        let wm = schema.column_index("weight_kg__missing").unwrap();
        assert_eq!(m.x[[0, w]], 0.0);
        assert_eq!(m.x[[0, wm]], 1.0);
    }

    #[test]
    fn fully_observed_record_has_no_indicators() {
        let records = cohort(80);
        let schema = Arc::new(derive_schema(&records, SchemaMode::Baseline).unwrap());
        let m = encode::<f64>(&[record(OutcomeLabel::Other)], &schema).unwrap();
        for (j, c) in schema.columns.iter().enumerate() {
            if c.kind == ColumnKind::MissingIndicator {
                assert_eq!(m.x[[0, j]], 0.0);
            }
        }
    }

    #[test]
    fn training_rows_are_centered_and_scaled() {
        let records = cohort(300);
        let schema = Arc::new(derive_schema(&records, SchemaMode::Retrospective).unwrap());
        let m = encode::<f64>(&records, &schema).unwrap();
        for (j, c) in schema.columns.iter().enumerate() {
            if c.kind != ColumnKind::Numeric {
                continue;
            }
            // independent recomputation of the column mean
            let mean = m.x.column(j).iter().sum::<f64>() / m.nrows() as f64;
            assert!(mean.abs() < 1e-9, "{}: {mean}", c.name);
            if !c.constant && schema.columns.get(j + 1).map(|n| n.kind) != Some(ColumnKind::MissingIndicator) {
                let var = m.x.column(j).iter().map(|v| v * v).sum::<f64>() / (m.nrows() - 1) as f64;
                assert!((var - 1.0).abs() < 1e-9, "{}: {var}", c.name);
            }
        }
        assert!(m.x.iter().all(|v| v.is_finite()));
        assert_eq!(m.labels.len(), m.nrows());
    }

    #[test]
    fn encoding_held_out_rows_leaves_schema_untouched() {
        let records = cohort(200);
        let schema = Arc::new(derive_schema(&records[..150], SchemaMode::Baseline).unwrap());
        let before = (*schema).clone();
        let a = encode::<f64>(&records[150..], &schema).unwrap();
        let b = encode::<f64>(&records[150..], &schema).unwrap();
        assert_eq!(*schema, before);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn feature_subset_schema() {
        let records = cohort(40);
        let opts = SchemaOptions {
            mode: SchemaMode::Baseline,
            features: vec![Feature::WeightKg, Feature::AgeYears],
        };
        let schema = derive_schema_with(&records, &opts).unwrap();
        assert_eq!(
            schema.column_names(),
            vec!["age_years", "weight_kg", "weight_kg__missing"]
        );
        assert_eq!(schema.features(), vec![Feature::AgeYears, Feature::WeightKg]);
    }

    #[test]
    fn fingerprint_tracks_column_list() {
        let a = FeatureSchema::raw(&["x", "y"]);
        let b = FeatureSchema::raw(&["x", "y"]);
        let c = FeatureSchema::raw(&["y", "x"]);
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_ne!(a.fingerprint, c.fingerprint);
        assert_eq!(a.fingerprint.len(), 16);
        let mut tampered = a.clone();
        tampered.columns.pop();
        assert!(tampered.verify().is_err());
        assert!(a.verify().is_ok());
        assert_eq!(a.without_columns(&["y".into()]).fingerprint, FeatureSchema::raw(&["x"]).fingerprint);
    }

    #[test]
    fn raw_schema_cannot_encode_records() {
        let schema = Arc::new(FeatureSchema::raw(&["x"]));
        assert!(matches!(
            encode::<f64>(&[record(OutcomeLabel::Continue)], &schema),
            Err(PreprocessError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn retrospective_patient_needs_length() {
        let records = cohort(30);
        let schema = derive_schema(&records, SchemaMode::Retrospective).unwrap();
        assert!(schema.encode_patient::<f64>(&records[0].patient, None).is_err());
        assert!(schema.encode_patient::<f64>(&records[0].patient, Some(3.0)).is_ok());
    }

    #[test]
    fn typical_values_come_from_training_stats() {
        let records = cohort(300);
        let schema = derive_schema(&records, SchemaMode::Baseline).unwrap();
        match schema.typical_value(Feature::AgeYears) {
            Some(FeatureValue::Number(v)) => assert!((v - 42.8).abs() < 3.0),
            other => panic!("{other:?}"),
        }
        // adalimumab is the most frequent biologic under the registry marginals
        assert_eq!(schema.typical_value(Feature::Biologic), Some(FeatureValue::Level(0)));
    }
}
