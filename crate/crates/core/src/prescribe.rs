//! Input optimization: search the feature grid for a patient profile that
//! maximizes the predicted probability of a target outcome, then read off
//! per-feature threshold constraints.

use std::fmt;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::cohort::{Feature, FeatureKind, FeatureValue, OutcomeLabel, Patient};
use crate::learn::{LearnError, ModelArtifact};
use crate::preprocess::PreprocessError;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PrescribeError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("no feasible profile on the search grid")]
    Infeasible,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

impl PrescribeError {
    pub fn name(&self) -> &'static str {
        match self {
            PrescribeError::UnknownFeature(_) => "UnknownFeature",
            PrescribeError::Infeasible => "Infeasible",
            PrescribeError::InvalidArgument(_) => "InvalidArgument",
            PrescribeError::Learn(e) => e.name(),
            PrescribeError::Preprocess(e) => e.name(),
        }
    }
}

/// Probability vector serialized as a map in label order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbabilities(pub [f64; OutcomeLabel::COUNT]);

impl ClassProbabilities {
    pub fn get(&self, label: OutcomeLabel) -> f64 {
        self.0[label.index()]
    }
}

impl Serialize for ClassProbabilities {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(OutcomeLabel::COUNT))?;
        for (l, p) in OutcomeLabel::ALL.iter().zip(&self.0) {
            map.serialize_entry(l.token(), p)?;
        }
        map.end()
    }
}

/// Grid of candidate values for one feature, in search order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub feature: Feature,
    pub values: Vec<FeatureValue>,
}

impl Grid {
    /// `points` evenly spaced values over the observed range for numeric
    /// features (every integer for counts), both values for flags and
    /// every level for categories.
    pub fn default_for(feature: Feature, points: usize) -> Self {
        let values = match feature.kind() {
            FeatureKind::Boolean => vec![FeatureValue::Flag(false), FeatureValue::Flag(true)],
            FeatureKind::Categorical => (0..feature.levels().len()).map(FeatureValue::Level).collect(),
            FeatureKind::Numeric => {
                let (lo, hi) = feature.observed_range().expect("numeric features have ranges");
                if feature.is_integer() {
                    (lo as i64..=hi as i64).map(|v| FeatureValue::Number(v as f64)).collect()
                } else {
                    Self::linspace(lo, hi, points)
                }
            }
        };
        Self { feature, values }
    }

    pub fn numeric(feature: Feature, lo: f64, hi: f64, points: usize) -> Self {
        Self {
            feature,
            values: Self::linspace(lo, hi, points),
        }
    }

    fn linspace(lo: f64, hi: f64, points: usize) -> Vec<FeatureValue> {
        if points <= 1 {
            return vec![FeatureValue::Number(lo)];
        }
        let step = (hi - lo) / (points - 1) as f64;
        (0..points)
            .map(|i| FeatureValue::Number(if i == points - 1 { hi } else { lo + step * i as f64 }))
            .collect()
    }

    /// Index of the grid value closest to `v` (earliest on ties).
    fn snap(&self, v: FeatureValue) -> usize {
        let dist = |g: &FeatureValue| match (g, v) {
            (FeatureValue::Number(a), FeatureValue::Number(b)) => (a - b).abs(),
            (a, b) if *a == b => 0.0,
            _ => f64::INFINITY,
        };
        let mut best = 0;
        for (i, g) in self.values.iter().enumerate() {
            if dist(g) < dist(&self.values[best]) {
                best = i;
            }
        }
        best
    }
}

/// JSON form of a single feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JsonValue {
    Number(f64),
    Flag(bool),
    Level(String),
    Levels(Vec<String>),
}

pub fn json_value(feature: Feature, v: FeatureValue) -> JsonValue {
    match v {
        FeatureValue::Number(x) => JsonValue::Number(x),
        FeatureValue::Flag(b) => JsonValue::Flag(b),
        FeatureValue::Level(i) => JsonValue::Level(feature.levels()[i].to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "=")]
    Equals,
    #[serde(rename = "in")]
    OneOf,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::AtMost => "≤",
            Relation::AtLeast => "≥",
            Relation::Equals => "=",
            Relation::OneOf => "∈",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConstraint {
    pub feature: Feature,
    pub relation: Relation,
    pub boundary: JsonValue,
    /// P(target) with the feature at the boundary and the rest of the
    /// profile held at the optimum.
    pub probability: f64,
}

impl fmt::Display for ProfileConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = match &self.boundary {
            JsonValue::Number(x) => format!("{x:.1}"),
            JsonValue::Flag(v) => v.to_string(),
            JsonValue::Level(l) => l.clone(),
            JsonValue::Levels(ls) => format!("{{{}}}", ls.join(", ")),
        };
        write!(f, "{} {} {}", self.feature, self.relation, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Profile {
    pub patient: Patient,
    pub probabilities: ClassProbabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeResult {
    pub target: OutcomeLabel,
    pub min_probability: f64,
    pub target_probability: f64,
    pub profile: Profile,
    pub constraints: Vec<ProfileConstraint>,
    pub sweeps: usize,
    /// The best profile found stays below `min_probability`; constraints
    /// are then empty.
    pub target_unreachable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOptions {
    pub target: OutcomeLabel,
    pub min_probability: f64,
    /// Points per numeric grid when `grids` is not given.
    pub points: usize,
    pub max_sweeps: usize,
    /// Explicit search space; defaults to every feature of the model's
    /// schema with [`Grid::default_for`].
    pub grids: Option<Vec<Grid>>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            target: OutcomeLabel::Continue,
            min_probability: 0.9,
            points: 50,
            max_sweeps: 10,
            grids: None,
        }
    }
}

/// A fully observed patient at the training mean (numeric) or mode
/// (categorical, flag) of every feature the schema knows about.
pub fn reference_patient<F: Scalar>(artifact: &ModelArtifact<F>) -> Patient {
    let mut p = Patient {
        age_years: 45.0,
        sex: crate::cohort::Sex::Male,
        height_cm: Some(170.0),
        weight_kg: Some(85.0),
        comorbidity_count: Some(0),
        age_at_diagnosis: Some(25.0),
        psa_diagnosis: false,
        previous_mtx: false,
        concurrent_mtx: Some(false),
        previous_biologic: false,
        baseline_dlqi: Some(13.0),
        baseline_pasi: Some(10.0),
        biologic: crate::cohort::Biologic::Adalimumab,
        repeat_series: false,
    };
    for f in Feature::ALL {
        if let Some(v) = artifact.schema.typical_value(f) {
            p.set(f, v);
        }
    }
    if p.age_at_diagnosis.is_some_and(|d| d > p.age_years) {
        p.age_at_diagnosis = Some(p.age_years);
    }
    p
}

/// Fills absent optional fields of `base` from the reference patient.
pub fn complete_patient<F: Scalar>(artifact: &ModelArtifact<F>, base: &Patient) -> Patient {
    let reference = reference_patient(artifact);
    let mut p = base.clone();
    for f in Feature::ALL {
        if p.get(f).is_none() {
            if let Some(v) = reference.get(f) {
                p.set(f, v);
            }
        }
    }
    p
}

fn probabilities<F: Scalar>(artifact: &ModelArtifact<F>, p: &Patient) -> Result<[f64; 6], PrescribeError> {
    let row = artifact.schema.encode_patient::<F>(p, None)?;
    let probs = artifact.probabilities(row.values.view())?;
    Ok(probs.map(|v| v.as_f64()))
}

fn feasible(p: &Patient) -> bool {
    p.validate().is_ok()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: JsonValue,
    pub probabilities: ClassProbabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCurve {
    pub feature: Feature,
    pub points: Vec<SweepPoint>,
}

/// Probability vectors along `grid` for one feature, with the rest of
/// `base` fixed. Infeasible grid points (e.g. diagnosis after the current
/// age) are still evaluated; the caller decides how to display them.
pub fn sweep_feature<F: Scalar>(
    artifact: &ModelArtifact<F>,
    base: &Patient,
    feature: Feature,
    grid: &[FeatureValue],
) -> Result<SweepCurve, PrescribeError> {
    if !artifact.kind.is_classifier() {
        return Err(LearnError::WrongKind {
            expected: "classifier".into(),
            found: artifact.kind.token().into(),
        }
        .into());
    }
    if !artifact.schema.features().contains(&feature) {
        return Err(PrescribeError::UnknownFeature(feature.name().to_string()));
    }
    let mut p = complete_patient(artifact, base);
    let mut points = Vec::with_capacity(grid.len());
    for &v in grid {
        if !p.set(feature, v) {
            return Err(PrescribeError::InvalidArgument(format!(
                "grid value {v:?} does not fit feature {feature}"
            )));
        }
        points.push(SweepPoint {
            value: json_value(feature, v),
            probabilities: ClassProbabilities(probabilities(artifact, &p)?),
        });
    }
    Ok(SweepCurve { feature, points })
}

/// Coordinate ascent over the product grid followed by one-at-a-time
/// constraint extraction around the optimum.
pub fn optimize_profile<F: Scalar>(
    artifact: &ModelArtifact<F>,
    options: &OptimizeOptions,
) -> Result<OptimizeResult, PrescribeError> {
    if !artifact.kind.is_classifier() {
        return Err(LearnError::WrongKind {
            expected: "classifier".into(),
            found: artifact.kind.token().into(),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&options.min_probability) {
        return Err(PrescribeError::InvalidArgument("min_probability must lie in [0, 1]".into()));
    }
    if options.max_sweeps == 0 {
        return Err(PrescribeError::InvalidArgument("max_sweeps must be >= 1".into()));
    }
    let known = artifact.schema.features();
    let grids: Vec<Grid> = match &options.grids {
        Some(g) => {
            for grid in g {
                if !known.contains(&grid.feature) {
                    return Err(PrescribeError::UnknownFeature(grid.feature.name().to_string()));
                }
                if grid.values.is_empty() {
                    return Err(PrescribeError::InvalidArgument(format!("empty grid for {}", grid.feature)));
                }
            }
            g.clone()
        }
        None => known.iter().map(|&f| Grid::default_for(f, options.points)).collect(),
    };
    let t = options.target.index();

    let mut current = reference_patient(artifact);
    let mut index: Vec<usize> = grids
        .iter()
        .map(|g| g.snap(current.get(g.feature).expect("reference patient is complete")))
        .collect();
    for (g, &i) in grids.iter().zip(&index) {
        current.set(g.feature, g.values[i]);
    }
    let mut best = probabilities(artifact, &current)?;
    // an infeasible incumbent loses to any feasible challenger
    let score = |p: &Patient, probs: &[f64; 6]| if feasible(p) { probs[t] } else { f64::NEG_INFINITY };
    let mut best_score = score(&current, &best);

    let mut sweeps = 0;
    while sweeps < options.max_sweeps {
        sweeps += 1;
        let before = best_score;
        let mut changed = false;
        for (gi, grid) in grids.iter().enumerate() {
            let mut trial = current.clone();
            let mut choice = index[gi];
            let mut choice_probs = best;
            let mut choice_score = best_score;
            for (i, &v) in grid.values.iter().enumerate() {
                if i == index[gi] {
                    continue;
                }
                trial.set(grid.feature, v);
                if !feasible(&trial) {
                    continue;
                }
                let p = probabilities(artifact, &trial)?;
                // strict improvement only: the incumbent wins ties, and
                // among challengers the earliest grid point does
                if p[t] > choice_score {
                    choice = i;
                    choice_probs = p;
                    choice_score = p[t];
                }
            }
            if choice != index[gi] {
                index[gi] = choice;
                current.set(grid.feature, grid.values[choice]);
                best = choice_probs;
                best_score = choice_score;
                changed = true;
            }
        }
        assert!(best_score >= before, "coordinate ascent lowered the objective");
        if !changed {
            break;
        }
    }

    if !feasible(&current) {
        return Err(PrescribeError::Infeasible);
    }
    let target_probability = best[t];
    let unreachable = target_probability < options.min_probability;
    let mut constraints = Vec::new();
    if !unreachable {
        for (gi, grid) in grids.iter().enumerate() {
            let mut trial = current.clone();
            let mut ok = Vec::with_capacity(grid.values.len());
            let mut probs = Vec::with_capacity(grid.values.len());
            for &v in &grid.values {
                trial.set(grid.feature, v);
                let p = if feasible(&trial) {
                    probabilities(artifact, &trial)?[t]
                } else {
                    f64::NEG_INFINITY
                };
                ok.push(p >= options.min_probability);
                probs.push(p);
            }
            constraints.extend(extract(grid, &ok, &probs, index[gi]));
        }
    }
    Ok(OptimizeResult {
        target: options.target,
        min_probability: options.min_probability,
        target_probability,
        profile: Profile {
            patient: current,
            probabilities: ClassProbabilities(best),
        },
        constraints,
        sweeps,
        target_unreachable: unreachable,
    })
}

fn extract(grid: &Grid, ok: &[bool], probs: &[f64], at: usize) -> Vec<ProfileConstraint> {
    let f = grid.feature;
    let last = grid.values.len() - 1;
    if ok.iter().all(|&b| b) {
        return Vec::new();
    }
    let constraint = |relation, i: usize| ProfileConstraint {
        feature: f,
        relation,
        boundary: json_value(f, grid.values[i]),
        probability: probs[i],
    };
    match f.kind() {
        FeatureKind::Numeric => {
            let mut lo = at;
            while lo > 0 && ok[lo - 1] {
                lo -= 1;
            }
            let mut hi = at;
            while hi < last && ok[hi + 1] {
                hi += 1;
            }
            let mut out = Vec::new();
            if lo > 0 {
                out.push(constraint(Relation::AtLeast, lo));
            }
            if hi < last {
                out.push(constraint(Relation::AtMost, hi));
            }
            out
        }
        FeatureKind::Boolean | FeatureKind::Categorical => {
            let members: Vec<usize> = (0..=last).filter(|&i| ok[i]).collect();
            if members.len() == 1 {
                vec![constraint(Relation::Equals, members[0])]
            } else {
                let levels = members
                    .iter()
                    .map(|&i| match json_value(f, grid.values[i]) {
                        JsonValue::Level(l) => l,
                        JsonValue::Flag(b) => b.to_string(),
                        JsonValue::Number(x) => x.to_string(),
                        JsonValue::Levels(_) => unreachable!(),
                    })
                    .collect();
                vec![ProfileConstraint {
                    feature: f,
                    relation: Relation::OneOf,
                    boundary: JsonValue::Levels(levels),
                    probability: members.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min),
                }]
            }
        }
    }
}
