//! Patient data model, registry CSV ingestion, completeness reporting and
//! the calibrated synthetic cohort generator.

mod io;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub use io::{load_cohort, load_patients, read_cohort, read_patients, write_cohort, CSV_COLUMNS};
pub use synth::{
    synthesize_cohort, synthesize_cohort_detailed, CohortSpec, Completeness, LengthMechanism,
    Marginals, NumericMarginal, OutcomeMechanism, SyntheticCohort, MECHANISM_FEATURES,
};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse {value:?}")]
    TypeError {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: {reason}")]
    RangeViolation {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl CohortError {
    /// Stable variant name used in machine-readable error lines.
    pub fn name(&self) -> &'static str {
        match self {
            CohortError::MissingColumn(_) => "MissingColumn",
            CohortError::TypeError { .. } => "TypeError",
            CohortError::RangeViolation { .. } => "RangeViolation",
            CohortError::EmptyCohort => "EmptyCohort",
            CohortError::InvalidSpec(_) => "InvalidSpec",
            CohortError::Io(_) => "Io",
            CohortError::Csv(_) => "Csv",
        }
    }
}

/// Cause of discontinuation at last observation, or continuation.
///
/// The declaration order is the fixed class order used by every model,
/// confusion matrix and probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    AdverseEvent,
    PatientDecision,
    LackOfEfficacy,
    LossToFollowUp,
    Other,
    Continue,
}

impl OutcomeLabel {
    pub const COUNT: usize = 6;
    pub const ALL: [OutcomeLabel; 6] = [
        OutcomeLabel::AdverseEvent,
        OutcomeLabel::PatientDecision,
        OutcomeLabel::LackOfEfficacy,
        OutcomeLabel::LossToFollowUp,
        OutcomeLabel::Other,
        OutcomeLabel::Continue,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// CSV / JSON token.
    pub fn token(self) -> &'static str {
        match self {
            OutcomeLabel::AdverseEvent => "adverse_event",
            OutcomeLabel::PatientDecision => "patient_decision",
            OutcomeLabel::LackOfEfficacy => "lack_of_efficacy",
            OutcomeLabel::LossToFollowUp => "loss_to_follow_up",
            OutcomeLabel::Other => "other",
            OutcomeLabel::Continue => "continue",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            OutcomeLabel::AdverseEvent => "Adverse event",
            OutcomeLabel::PatientDecision => "Patient's decision",
            OutcomeLabel::LackOfEfficacy => "Lack of efficacy",
            OutcomeLabel::LossToFollowUp => "Loss to follow up",
            OutcomeLabel::Other => "Other",
            OutcomeLabel::Continue => "Continue",
        }
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for OutcomeLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.token() == s)
            .ok_or_else(|| format!("unknown outcome `{s}`"))
    }
}

/// One-vs-rest groupings used for ROC analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RocGroup {
    AnyReason,
    LackOfEfficacy,
    AdverseEvent,
    OtherReasons,
}

impl RocGroup {
    /// Reporting order of the AUC table.
    pub const ALL: [RocGroup; 4] = [
        RocGroup::AnyReason,
        RocGroup::LackOfEfficacy,
        RocGroup::AdverseEvent,
        RocGroup::OtherReasons,
    ];

    pub fn contains(self, label: OutcomeLabel) -> bool {
        group_outcomes(label).contains(&self)
    }

    /// Labels whose probabilities are summed into this group's score.
    pub fn members(self) -> Vec<OutcomeLabel> {
        OutcomeLabel::ALL
            .into_iter()
            .filter(|&l| self.contains(l))
            .collect()
    }

    pub fn token(self) -> &'static str {
        match self {
            RocGroup::AnyReason => "any_reason",
            RocGroup::LackOfEfficacy => "lack_of_efficacy",
            RocGroup::AdverseEvent => "adverse_event",
            RocGroup::OtherReasons => "other_reasons",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            RocGroup::AnyReason => "Any reason",
            RocGroup::LackOfEfficacy => "Lack of efficacy",
            RocGroup::AdverseEvent => "Adverse event",
            RocGroup::OtherReasons => "Other reasons",
        }
    }
}

/// Discontinuation groups a label belongs to. `Continue` belongs to none and
/// is the negative class for every grouping.
pub fn group_outcomes(label: OutcomeLabel) -> &'static [RocGroup] {
    match label {
        OutcomeLabel::Continue => &[],
        OutcomeLabel::AdverseEvent => &[RocGroup::AdverseEvent, RocGroup::AnyReason],
        OutcomeLabel::LackOfEfficacy => &[RocGroup::LackOfEfficacy, RocGroup::AnyReason],
        OutcomeLabel::PatientDecision | OutcomeLabel::LossToFollowUp | OutcomeLabel::Other => {
            &[RocGroup::OtherReasons, RocGroup::AnyReason]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn token(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Biologic {
    Adalimumab,
    Etanercept,
    Infliximab,
    Ustekinumab,
}

impl Biologic {
    pub const ALL: [Biologic; 4] = [
        Biologic::Adalimumab,
        Biologic::Etanercept,
        Biologic::Infliximab,
        Biologic::Ustekinumab,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Biologic::Adalimumab => "adalimumab",
            Biologic::Etanercept => "etanercept",
            Biologic::Infliximab => "infliximab",
            Biologic::Ustekinumab => "ustekinumab",
        }
    }
}

/// Baseline characteristics of one patient: everything known when a
/// biologic is initiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub age_years: f64,
    pub sex: Sex,
    #[serde(default)]
    pub height_cm: Option<f64>,
    #[serde(default)]
    pub weight_kg: Option<f64>,
    #[serde(default)]
    pub comorbidity_count: Option<u32>,
    #[serde(default)]
    pub age_at_diagnosis: Option<f64>,
    #[serde(deserialize_with = "flag")]
    pub psa_diagnosis: bool,
    #[serde(deserialize_with = "flag")]
    pub previous_mtx: bool,
    #[serde(default, deserialize_with = "optional_flag")]
    pub concurrent_mtx: Option<bool>,
    #[serde(deserialize_with = "flag")]
    pub previous_biologic: bool,
    #[serde(default)]
    pub baseline_dlqi: Option<f64>,
    #[serde(default)]
    pub baseline_pasi: Option<f64>,
    pub biologic: Biologic,
    #[serde(deserialize_with = "flag")]
    pub repeat_series: bool,
}

/// One registry row: baseline characteristics plus observed outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    #[serde(flatten)]
    pub patient: Patient,
    pub treatment_length_months: f64,
    pub outcome: OutcomeLabel,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FlagRepr {
    Bool(bool),
    Int(i64),
}

fn flag_from(repr: FlagRepr) -> Result<bool, String> {
    match repr {
        FlagRepr::Bool(b) => Ok(b),
        FlagRepr::Int(0) => Ok(false),
        FlagRepr::Int(1) => Ok(true),
        FlagRepr::Int(other) => Err(format!("expected 0/1 or a boolean, got {other}")),
    }
}

fn flag<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    flag_from(FlagRepr::deserialize(d)?).map_err(serde::de::Error::custom)
}

fn optional_flag<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
    Option::<FlagRepr>::deserialize(d)?
        .map(flag_from)
        .transpose()
        .map_err(serde::de::Error::custom)
}

/// A violated record invariant, located by column.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantViolation {
    pub column: &'static str,
    pub reason: String,
}

fn check_range(
    column: &'static str,
    value: f64,
    lo: f64,
    hi: f64,
) -> Result<(), InvariantViolation> {
    if !value.is_finite() || value < lo || value > hi {
        return Err(InvariantViolation {
            column,
            reason: format!("{value} outside [{lo}, {hi}]"),
        });
    }
    Ok(())
}

impl Patient {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        check_range("age_years", self.age_years, 0.0, 120.0)?;
        if let Some(h) = self.height_cm {
            check_range("height_cm", h, f64::MIN_POSITIVE, 300.0)?;
        }
        if let Some(w) = self.weight_kg {
            check_range("weight_kg", w, f64::MIN_POSITIVE, 500.0)?;
        }
        if let Some(d) = self.age_at_diagnosis {
            check_range("age_at_diagnosis", d, 0.0, 120.0)?;
            if d > self.age_years {
                return Err(InvariantViolation {
                    column: "age_at_diagnosis",
                    reason: format!("{d} exceeds age_years {}", self.age_years),
                });
            }
        }
        if let Some(v) = self.baseline_dlqi {
            check_range("baseline_dlqi", v, 0.0, 32.0)?;
        }
        if let Some(v) = self.baseline_pasi {
            check_range("baseline_pasi", v, 0.0, 72.0)?;
        }
        Ok(())
    }

    pub fn get(&self, feature: Feature) -> Option<FeatureValue> {
        use FeatureValue::*;
        match feature {
            Feature::AgeYears => Some(Number(self.age_years)),
            Feature::Sex => Some(Level(self.sex as usize)),
            Feature::HeightCm => self.height_cm.map(Number),
            Feature::WeightKg => self.weight_kg.map(Number),
            Feature::ComorbidityCount => self.comorbidity_count.map(|c| Number(c as f64)),
            Feature::AgeAtDiagnosis => self.age_at_diagnosis.map(Number),
            Feature::PsaDiagnosis => Some(Flag(self.psa_diagnosis)),
            Feature::PreviousMtx => Some(Flag(self.previous_mtx)),
            Feature::ConcurrentMtx => self.concurrent_mtx.map(Flag),
            Feature::PreviousBiologic => Some(Flag(self.previous_biologic)),
            Feature::BaselineDlqi => self.baseline_dlqi.map(Number),
            Feature::BaselinePasi => self.baseline_pasi.map(Number),
            Feature::Biologic => Some(Level(self.biologic as usize)),
            Feature::RepeatSeries => Some(Flag(self.repeat_series)),
        }
    }

    /// Sets one feature. Numeric values for integer features are rounded;
    /// a mismatched value kind is ignored and reported as `false`.
    pub fn set(&mut self, feature: Feature, value: FeatureValue) -> bool {
        use FeatureValue::*;
        match (feature, value) {
            (Feature::AgeYears, Number(v)) => self.age_years = v,
            (Feature::Sex, Level(i)) if i < 2 => self.sex = Sex::ALL[i],
            (Feature::HeightCm, Number(v)) => self.height_cm = Some(v),
            (Feature::WeightKg, Number(v)) => self.weight_kg = Some(v),
            (Feature::ComorbidityCount, Number(v)) if v >= 0.0 => {
                self.comorbidity_count = Some(v.round() as u32)
            }
            (Feature::AgeAtDiagnosis, Number(v)) => self.age_at_diagnosis = Some(v),
            (Feature::PsaDiagnosis, Flag(b)) => self.psa_diagnosis = b,
            (Feature::PreviousMtx, Flag(b)) => self.previous_mtx = b,
            (Feature::ConcurrentMtx, Flag(b)) => self.concurrent_mtx = Some(b),
            (Feature::PreviousBiologic, Flag(b)) => self.previous_biologic = b,
            (Feature::BaselineDlqi, Number(v)) => self.baseline_dlqi = Some(v),
            (Feature::BaselinePasi, Number(v)) => self.baseline_pasi = Some(v),
            (Feature::Biologic, Level(i)) if i < 4 => self.biologic = Biologic::ALL[i],
            (Feature::RepeatSeries, Flag(b)) => self.repeat_series = b,
            _ => return false,
        }
        true
    }
}

/// Value of a single baseline feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureValue {
    Number(f64),
    Flag(bool),
    /// Index into [`Feature::levels`].
    Level(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    Boolean,
    Categorical,
}

/// The fourteen baseline features, in registry table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    AgeYears,
    Sex,
    HeightCm,
    WeightKg,
    ComorbidityCount,
    AgeAtDiagnosis,
    PsaDiagnosis,
    PreviousMtx,
    ConcurrentMtx,
    PreviousBiologic,
    BaselineDlqi,
    BaselinePasi,
    Biologic,
    RepeatSeries,
}

impl Feature {
    pub const ALL: [Feature; 14] = [
        Feature::AgeYears,
        Feature::Sex,
        Feature::HeightCm,
        Feature::WeightKg,
        Feature::ComorbidityCount,
        Feature::AgeAtDiagnosis,
        Feature::PsaDiagnosis,
        Feature::PreviousMtx,
        Feature::ConcurrentMtx,
        Feature::PreviousBiologic,
        Feature::BaselineDlqi,
        Feature::BaselinePasi,
        Feature::Biologic,
        Feature::RepeatSeries,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::AgeYears => "age_years",
            Feature::Sex => "sex",
            Feature::HeightCm => "height_cm",
            Feature::WeightKg => "weight_kg",
            Feature::ComorbidityCount => "comorbidity_count",
            Feature::AgeAtDiagnosis => "age_at_diagnosis",
            Feature::PsaDiagnosis => "psa_diagnosis",
            Feature::PreviousMtx => "previous_mtx",
            Feature::ConcurrentMtx => "concurrent_mtx",
            Feature::PreviousBiologic => "previous_biologic",
            Feature::BaselineDlqi => "baseline_dlqi",
            Feature::BaselinePasi => "baseline_pasi",
            Feature::Biologic => "biologic",
            Feature::RepeatSeries => "repeat_series",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn kind(self) -> FeatureKind {
        match self {
            Feature::Sex | Feature::Biologic => FeatureKind::Categorical,
            Feature::PsaDiagnosis
            | Feature::PreviousMtx
            | Feature::ConcurrentMtx
            | Feature::PreviousBiologic
            | Feature::RepeatSeries => FeatureKind::Boolean,
            _ => FeatureKind::Numeric,
        }
    }

    pub fn is_optional(self) -> bool {
        matches!(
            self,
            Feature::HeightCm
                | Feature::WeightKg
                | Feature::ComorbidityCount
                | Feature::AgeAtDiagnosis
                | Feature::ConcurrentMtx
                | Feature::BaselineDlqi
                | Feature::BaselinePasi
        )
    }

    /// Category level tokens; empty for non-categorical features.
    pub fn levels(self) -> &'static [&'static str] {
        match self {
            Feature::Sex => &["male", "female"],
            Feature::Biologic => &["adalimumab", "etanercept", "infliximab", "ustekinumab"],
            _ => &[],
        }
    }

    /// Observed registry range, the default feasible range for profile search.
    pub fn observed_range(self) -> Option<(f64, f64)> {
        match self {
            Feature::AgeYears => Some((9.0, 83.0)),
            Feature::HeightCm => Some((110.0, 198.0)),
            Feature::WeightKg => Some((30.0, 180.0)),
            Feature::ComorbidityCount => Some((0.0, 5.0)),
            Feature::AgeAtDiagnosis => Some((9.0, 70.0)),
            Feature::BaselineDlqi => Some((0.0, 32.0)),
            Feature::BaselinePasi => Some((0.0, 39.4)),
            _ => None,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Feature::ComorbidityCount)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessRow {
    pub feature: Feature,
    /// Percent of records carrying the feature, rounded to two decimals.
    pub percent: f64,
}

/// Per-feature data completeness, one row per baseline feature.
pub fn completeness_report(records: &[PatientRecord]) -> Result<Vec<CompletenessRow>, CohortError> {
    if records.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let n = records.len() as f64;
    Ok(Feature::ALL
        .into_iter()
        .map(|feature| {
            let present = records
                .iter()
                .filter(|r| r.patient.get(feature).is_some())
                .count() as f64;
            CompletenessRow {
                feature,
                percent: (10_000.0 * present / n).round() / 100.0,
            }
        })
        .collect())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn outcome_tokens_round_trip() {
        for l in OutcomeLabel::ALL {
            assert_eq!(l.token().parse::<OutcomeLabel>().unwrap(), l);
            assert_eq!(OutcomeLabel::from_index(l.index()), Some(l));
        }
        assert!("withdrawn".parse::<OutcomeLabel>().is_err());
    }

    #[test]
    fn loss_to_follow_up_is_other_reason_and_any_reason() {
        let g = group_outcomes(OutcomeLabel::LossToFollowUp);
        assert!(g.contains(&RocGroup::OtherReasons));
        assert!(g.contains(&RocGroup::AnyReason));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn continue_has_no_group() {
        assert!(group_outcomes(OutcomeLabel::Continue).is_empty());
    }

    #[test]
    fn grouping_is_total_with_expected_preimages() {
        // every label maps; specific-group preimages are {1,1,1,3} plus Continue
        let mut specific = std::collections::HashMap::new();
        let mut any = 0;
        for l in OutcomeLabel::ALL {
            let groups = group_outcomes(l);
            if l == OutcomeLabel::Continue {
                assert!(groups.is_empty());
                continue;
            }
            assert!(groups.contains(&RocGroup::AnyReason));
            any += 1;
            let cause: Vec<_> = groups
                .iter()
                .filter(|g| **g != RocGroup::AnyReason)
                .collect();
            assert_eq!(cause.len(), 1);
            *specific.entry(*cause[0]).or_insert(0) += 1;
        }
        assert_eq!(any, 5);
        let mut sizes: Vec<_> = specific.values().copied().collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 3]);
        assert_eq!(RocGroup::OtherReasons.members().len(), 3);
        assert_eq!(RocGroup::AnyReason.members().len(), 5);
    }

    #[test]
    fn validate_flags_diagnosis_after_age() {
        let mut p = patient();
        p.age_years = 42.0;
        p.age_at_diagnosis = Some(70.0);
        assert_eq!(p.validate().unwrap_err().column, "age_at_diagnosis");
    }

    #[test]
    fn validate_bounds_scores() {
        let mut p = patient();
        p.baseline_dlqi = Some(33.0);
        assert_eq!(p.validate().unwrap_err().column, "baseline_dlqi");
        let mut p = patient();
        p.baseline_pasi = Some(72.0);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn completeness_counts_present_values() {
        let mut records: Vec<_> = (0..4).map(|_| record(OutcomeLabel::Continue)).collect();
        for r in records.iter_mut().skip(1) {
            r.patient.baseline_dlqi = None;
        }
        let report = completeness_report(&records).unwrap();
        assert_eq!(report.len(), 14);
        let dlqi = report
            .iter()
            .find(|r| r.feature == Feature::BaselineDlqi)
            .unwrap();
        assert_eq!(dlqi.percent, 25.0);
        assert!(report
            .iter()
            .filter(|r| r.feature != Feature::BaselineDlqi)
            .all(|r| r.percent == 100.0));
    }

    #[test]
    fn completeness_rounds_to_two_decimals() {
        let mut records: Vec<_> = (0..681).map(|_| record(OutcomeLabel::Continue)).collect();
        for r in records.iter_mut().skip(390) {
            r.patient.weight_kg = None;
        }
        let report = completeness_report(&records).unwrap();
        let w = report.iter().find(|r| r.feature == Feature::WeightKg).unwrap();
        assert_eq!(w.percent, 57.27);
    }

    #[test]
    fn completeness_rejects_empty() {
        assert!(matches!(completeness_report(&[]), Err(CohortError::EmptyCohort)));
    }

    #[test]
    fn patient_json_accepts_nulls_and_numeric_flags() {
        let json = r#"{"age_years":50,"sex":"male","weight_kg":null,"psa_diagnosis":1,
            "previous_mtx":false,"previous_biologic":0,"biologic":"infliximab","repeat_series":true}"#;
        let p: Patient = serde_json::from_str(json).unwrap();
        assert!(p.weight_kg.is_none());
        assert!(p.psa_diagnosis);
        assert!(p.concurrent_mtx.is_none());
        assert_eq!(p.biologic, Biologic::Infliximab);
    }

    #[test]
    fn set_and_get_are_consistent() {
        let mut p = patient();
        for f in Feature::ALL {
            let v = p.get(f).unwrap();
            assert!(p.set(f, v));
            assert_eq!(p.get(f), Some(v));
        }
        assert!(!p.set(Feature::Sex, FeatureValue::Number(1.0)));
    }
}
