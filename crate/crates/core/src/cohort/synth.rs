//! Seeded synthetic cohorts with registry-like marginals and a planted
//! outcome/length mechanism.
//!
//! Every numeric marginal is a scaled Beta distribution on its declared
//! range whose mean and SD match the target exactly. Outcomes are drawn from
//! a softmax over a small fixed basis of record features
//! ([`MECHANISM_FEATURES`]); treatment length is linear in the same basis
//! plus Gaussian noise, truncated at zero. Missingness is applied after the
//! outcome is drawn, completely at random.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Biologic, CohortError, OutcomeLabel, Patient, PatientRecord, Sex};
use crate::scalar::softmax_in_place;

/// Basis the planted mechanisms are linear in. Ages and DLQI are centered
/// on their marginal means and expressed per ten units.
pub const MECHANISM_FEATURES: [&str; 12] = [
    "intercept",
    "age_decades",
    "female",
    "weight_over_100",
    "previous_biologic",
    "psa_diagnosis",
    "etanercept",
    "infliximab",
    "ustekinumab",
    "dlqi_decades",
    "repeat_series",
    "previous_mtx",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericMarginal {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl NumericMarginal {
    pub const fn new(mean: f64, sd: f64, min: f64, max: f64) -> Self {
        Self { mean, sd, min, max }
    }

    fn validate(&self, name: &str) -> Result<(), CohortError> {
        let bad = |why: &str| Err(CohortError::InvalidSpec(format!("{name}: {why}")));
        if !(self.min < self.mean && self.mean < self.max) {
            return bad("mean must lie strictly inside [min, max]");
        }
        if !(self.sd > 0.0) {
            return bad("sd must be positive");
        }
        if self.sd * self.sd >= (self.mean - self.min) * (self.max - self.mean) {
            return bad("sd too large for a bounded distribution with this mean");
        }
        Ok(())
    }

    fn sampler(&self) -> Beta<f64> {
        let width = self.max - self.min;
        let m = (self.mean - self.min) / width;
        let v = (self.sd / width).powi(2);
        let k = m * (1.0 - m) / v - 1.0;
        Beta::new(m * k, (1.0 - m) * k).expect("validated marginal")
    }
}

/// Marginal targets; defaults reproduce the registry table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Marginals {
    pub age_years: NumericMarginal,
    pub male_fraction: f64,
    pub height_cm: NumericMarginal,
    pub weight_kg: NumericMarginal,
    /// Relative weights of comorbidity counts 0, 1, 2, ...
    pub comorbidity_weights: Vec<f64>,
    pub age_at_diagnosis: NumericMarginal,
    pub psa_fraction: f64,
    pub previous_mtx_fraction: f64,
    pub concurrent_mtx_fraction: f64,
    pub previous_biologic_fraction: f64,
    pub baseline_dlqi: NumericMarginal,
    pub baseline_pasi: NumericMarginal,
    /// Relative weights of adalimumab, etanercept, infliximab, ustekinumab.
    pub biologic_weights: [f64; 4],
    pub repeat_series_fraction: f64,
}

impl Default for Marginals {
    fn default() -> Self {
        Self {
            age_years: NumericMarginal::new(42.8, 13.0, 9.0, 83.0),
            male_fraction: 375.0 / 681.0,
            height_cm: NumericMarginal::new(174.1, 9.5, 110.0, 198.0),
            weight_kg: NumericMarginal::new(85.6, 18.0, 30.0, 180.0),
            comorbidity_weights: vec![395.0, 136.0, 40.0, 12.0, 6.0, 4.0],
            age_at_diagnosis: NumericMarginal::new(25.84, 12.0, 9.0, 70.0),
            psa_fraction: 227.0 / 681.0,
            previous_mtx_fraction: 138.0 / 681.0,
            concurrent_mtx_fraction: 49.0 / 368.0,
            previous_biologic_fraction: 217.0 / 681.0,
            baseline_dlqi: NumericMarginal::new(13.56, 7.0, 0.0, 32.0),
            baseline_pasi: NumericMarginal::new(10.5, 6.0, 0.0, 39.4),
            biologic_weights: [253.0, 196.0, 117.0, 115.0],
            repeat_series_fraction: 433.0 / 681.0,
        }
    }
}

/// Fraction of records on which each optional feature is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Completeness {
    pub height_cm: f64,
    pub weight_kg: f64,
    pub comorbidity_count: f64,
    pub age_at_diagnosis: f64,
    pub concurrent_mtx: f64,
    pub baseline_dlqi: f64,
    pub baseline_pasi: f64,
}

impl Default for Completeness {
    fn default() -> Self {
        Self {
            height_cm: 0.7474,
            weight_kg: 0.5727,
            comorbidity_count: 0.8708,
            age_at_diagnosis: 0.8032,
            concurrent_mtx: 0.5404,
            baseline_dlqi: 0.3818,
            baseline_pasi: 0.0825,
        }
    }
}

impl Completeness {
    pub fn full() -> Self {
        Self {
            height_cm: 1.0,
            weight_kg: 1.0,
            comorbidity_count: 1.0,
            age_at_diagnosis: 1.0,
            concurrent_mtx: 1.0,
            baseline_dlqi: 1.0,
            baseline_pasi: 1.0,
        }
    }

    fn fractions(&self) -> [(&'static str, f64); 7] {
        [
            ("height_cm", self.height_cm),
            ("weight_kg", self.weight_kg),
            ("comorbidity_count", self.comorbidity_count),
            ("age_at_diagnosis", self.age_at_diagnosis),
            ("concurrent_mtx", self.concurrent_mtx),
            ("baseline_dlqi", self.baseline_dlqi),
            ("baseline_pasi", self.baseline_pasi),
        ]
    }
}

/// Softmax outcome model: one coefficient row per outcome label (label
/// order), each over [`MECHANISM_FEATURES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMechanism {
    pub coefficients: Vec<Vec<f64>>,
}

impl Default for OutcomeMechanism {
    fn default() -> Self {
        // int, age, fem, w>100, prevbio, psa, etan, infl, ust, dlqi, repeat, prevmtx
        Self {
            coefficients: vec![
                vec![-2.0, 0.3, 0.0, 0.5, 0.0, 5.0, 0.0, 0.0, -1.0, 0.0, -1.5, 0.0],
                vec![-3.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![-2.0, 0.2, 0.0, 1.5, 5.5, -1.5, 0.5, 2.0, -2.0, -0.3, -1.5, 0.0],
                vec![-4.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![-4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.0, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.5, 0.0],
            ],
        }
    }
}

impl OutcomeMechanism {
    pub fn zeros() -> Self {
        Self {
            coefficients: vec![vec![0.0; MECHANISM_FEATURES.len()]; OutcomeLabel::COUNT],
        }
    }

    pub fn probabilities(&self, basis: &[f64]) -> [f64; 6] {
        let mut scores = [0.0; 6];
        for (s, row) in scores.iter_mut().zip(&self.coefficients) {
            *s = row.iter().zip(basis).map(|(c, x)| c * x).sum();
        }
        softmax_in_place(&mut scores);
        scores
    }
}

/// Linear treatment-length model over [`MECHANISM_FEATURES`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthMechanism {
    pub coefficients: Vec<f64>,
    pub noise_sd: f64,
}

impl Default for LengthMechanism {
    fn default() -> Self {
        // signal SD ≈ 14.8 months under the default marginals
        Self {
            coefficients: vec![
                58.0, 7.6, -2.0, 0.0, -15.0, -5.0, 4.0, -10.0, 7.5, 0.0, 12.5, 0.0,
            ],
            noise_sd: 5.6,
        }
    }
}

impl LengthMechanism {
    pub fn mean(&self, basis: &[f64]) -> f64 {
        self.coefficients.iter().zip(basis).map(|(c, x)| c * x).sum()
    }
}

/// Full description of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub marginals: Marginals,
    #[serde(default)]
    pub completeness: Completeness,
    #[serde(default)]
    pub outcome_mechanism: OutcomeMechanism,
    #[serde(default)]
    pub length_mechanism: LengthMechanism,
}

impl CohortSpec {
    /// Registry-calibrated defaults for `n` patients.
    pub fn registry_like(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            marginals: Marginals::default(),
            completeness: Completeness::default(),
            outcome_mechanism: OutcomeMechanism::default(),
            length_mechanism: LengthMechanism::default(),
        }
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |why: String| Err(CohortError::InvalidSpec(why));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        let m = &self.marginals;
        m.age_years.validate("age_years")?;
        m.height_cm.validate("height_cm")?;
        m.weight_kg.validate("weight_kg")?;
        m.age_at_diagnosis.validate("age_at_diagnosis")?;
        m.baseline_dlqi.validate("baseline_dlqi")?;
        m.baseline_pasi.validate("baseline_pasi")?;
        if m.age_years.min < 0.0 || m.age_years.max > 120.0 {
            return bad("age_years range must lie within [0, 120]".into());
        }
        if m.baseline_dlqi.min < 0.0 || m.baseline_dlqi.max > 32.0 {
            return bad("baseline_dlqi range must lie within [0, 32]".into());
        }
        if m.baseline_pasi.min < 0.0 || m.baseline_pasi.max > 72.0 {
            return bad("baseline_pasi range must lie within [0, 72]".into());
        }
        for (name, p) in [
            ("male_fraction", m.male_fraction),
            ("psa_fraction", m.psa_fraction),
            ("previous_mtx_fraction", m.previous_mtx_fraction),
            ("concurrent_mtx_fraction", m.concurrent_mtx_fraction),
            ("previous_biologic_fraction", m.previous_biologic_fraction),
            ("repeat_series_fraction", m.repeat_series_fraction),
        ]
        .into_iter()
        .chain(self.completeness.fractions())
        {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a fraction in [0, 1]"));
            }
        }
        let weights_ok =
            |w: &[f64]| !w.is_empty() && w.iter().all(|&x| x >= 0.0 && x.is_finite()) && w.iter().sum::<f64>() > 0.0;
        if !weights_ok(&m.comorbidity_weights) {
            return bad("comorbidity_weights must be non-negative with positive sum".into());
        }
        if !weights_ok(&m.biologic_weights) {
            return bad("biologic_weights must be non-negative with positive sum".into());
        }
        let width = MECHANISM_FEATURES.len();
        let rows = &self.outcome_mechanism.coefficients;
        if rows.len() != OutcomeLabel::COUNT || rows.iter().any(|r| r.len() != width) {
            return bad(format!(
                "outcome_mechanism.coefficients must be {}x{width}",
                OutcomeLabel::COUNT
            ));
        }
        if self.length_mechanism.coefficients.len() != width {
            return bad(format!("length_mechanism.coefficients must have {width} entries"));
        }
        if !(self.length_mechanism.noise_sd >= 0.0) {
            return bad("length_mechanism.noise_sd must be non-negative".into());
        }
        Ok(())
    }

    /// Mechanism basis of a fully observed patient.
    pub fn mechanism_basis(&self, p: &Patient, true_weight: f64, true_dlqi: f64) -> Vec<f64> {
        let m = &self.marginals;
        let b = |flag: bool| if flag { 1.0 } else { 0.0 };
        vec![
            1.0,
            (p.age_years - m.age_years.mean) / 10.0,
            b(p.sex == Sex::Female),
            b(true_weight > 100.0),
            b(p.previous_biologic),
            b(p.psa_diagnosis),
            b(p.biologic == Biologic::Etanercept),
            b(p.biologic == Biologic::Infliximab),
            b(p.biologic == Biologic::Ustekinumab),
            (true_dlqi - m.baseline_dlqi.mean) / 10.0,
            b(p.repeat_series),
            b(p.previous_mtx),
        ]
    }
}

/// Generated records together with the latent planted quantities.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub records: Vec<PatientRecord>,
    /// Planted outcome probabilities per record (label order).
    pub latent_probabilities: Vec<[f64; 6]>,
    /// Planted noiseless treatment length per record.
    pub latent_length: Vec<f64>,
}

impl SyntheticCohort {
    /// Accuracy of predicting each record's label by the argmax of its
    /// planted probabilities: the best any classifier can do in expectation.
    pub fn bayes_accuracy(&self) -> f64 {
        let hits = self
            .records
            .iter()
            .zip(&self.latent_probabilities)
            .filter(|(r, p)| crate::scalar::argmax(&p[..]) == r.outcome.index())
            .count();
        hits as f64 / self.records.len() as f64
    }
}

pub fn synthesize_cohort(spec: &CohortSpec) -> Result<Vec<PatientRecord>, CohortError> {
    Ok(synthesize_cohort_detailed(spec)?.records)
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

pub fn synthesize_cohort_detailed(spec: &CohortSpec) -> Result<SyntheticCohort, CohortError> {
    spec.validate()?;
    let m = &spec.marginals;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let age = m.age_years.sampler();
    let height = m.height_cm.sampler();
    let weight = m.weight_kg.sampler();
    let diagnosis = m.age_at_diagnosis.sampler();
    let dlqi = m.baseline_dlqi.sampler();
    let pasi = m.baseline_pasi.sampler();
    let comorbidity = WeightedIndex::new(&m.comorbidity_weights)
        .map_err(|e| CohortError::InvalidSpec(e.to_string()))?;
    let biologic = WeightedIndex::new(m.biologic_weights)
        .map_err(|e| CohortError::InvalidSpec(e.to_string()))?;
    let noise = Normal::new(0.0, spec.length_mechanism.noise_sd)
        .map_err(|e| CohortError::InvalidSpec(e.to_string()))?;
    let scaled = |d: &Beta<f64>, nm: &NumericMarginal, rng: &mut ChaCha8Rng| {
        nm.min + (nm.max - nm.min) * d.sample(rng)
    };

    let mut records = Vec::with_capacity(spec.n);
    let mut latent_probabilities = Vec::with_capacity(spec.n);
    let mut latent_length = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let age_years = round_to(scaled(&age, &m.age_years, &mut rng), 1);
        let sex = if rng.random_bool(m.male_fraction) {
            Sex::Male
        } else {
            Sex::Female
        };
        let height_cm = round_to(scaled(&height, &m.height_cm, &mut rng), 1);
        let weight_kg = round_to(scaled(&weight, &m.weight_kg, &mut rng), 1);
        let comorbidity_count = comorbidity.sample(&mut rng) as u32;
        let age_at_diagnosis =
            round_to(scaled(&diagnosis, &m.age_at_diagnosis, &mut rng), 1).min(age_years);
        let psa_diagnosis = rng.random_bool(m.psa_fraction);
        let previous_mtx = rng.random_bool(m.previous_mtx_fraction);
        let concurrent_mtx = rng.random_bool(m.concurrent_mtx_fraction);
        let previous_biologic = rng.random_bool(m.previous_biologic_fraction);
        let baseline_dlqi = scaled(&dlqi, &m.baseline_dlqi, &mut rng).round();
        let baseline_pasi = round_to(scaled(&pasi, &m.baseline_pasi, &mut rng), 1);
        let drug = Biologic::ALL[biologic.sample(&mut rng)];
        let repeat_series = rng.random_bool(m.repeat_series_fraction);

        let mut patient = Patient {
            age_years,
            sex,
            height_cm: Some(height_cm),
            weight_kg: Some(weight_kg),
            comorbidity_count: Some(comorbidity_count),
            age_at_diagnosis: Some(age_at_diagnosis),
            psa_diagnosis,
            previous_mtx,
            concurrent_mtx: Some(concurrent_mtx),
            previous_biologic,
            baseline_dlqi: Some(baseline_dlqi),
            baseline_pasi: Some(baseline_pasi),
            biologic: drug,
            repeat_series,
        };
        let basis = spec.mechanism_basis(&patient, weight_kg, baseline_dlqi);
        let probabilities = spec.outcome_mechanism.probabilities(&basis);
        let outcome = OutcomeLabel::ALL[WeightedIndex::new(probabilities)
            .map_err(|e| CohortError::InvalidSpec(e.to_string()))?
            .sample(&mut rng)];
        let mean_length = spec.length_mechanism.mean(&basis);
        let length = round_to((mean_length + noise.sample(&mut rng)).max(0.0), 2);

        let c = &spec.completeness;
        if !rng.random_bool(c.height_cm) {
            patient.height_cm = None;
        }
        if !rng.random_bool(c.weight_kg) {
            patient.weight_kg = None;
        }
        if !rng.random_bool(c.comorbidity_count) {
            patient.comorbidity_count = None;
        }
        if !rng.random_bool(c.age_at_diagnosis) {
            patient.age_at_diagnosis = None;
        }
        if !rng.random_bool(c.concurrent_mtx) {
            patient.concurrent_mtx = None;
        }
        if !rng.random_bool(c.baseline_dlqi) {
            patient.baseline_dlqi = None;
        }
        if !rng.random_bool(c.baseline_pasi) {
            patient.baseline_pasi = None;
        }
        debug_assert!(patient.validate().is_ok());

        records.push(PatientRecord {
            patient,
            treatment_length_months: length,
            outcome,
        });
        latent_probabilities.push(probabilities);
        latent_length.push(mean_length);
    }
    Ok(SyntheticCohort {
        records,
        latent_probabilities,
        latent_length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_size_is_rejected() {
        let spec = CohortSpec::registry_like(0, 1);
        assert!(matches!(synthesize_cohort(&spec), Err(CohortError::InvalidSpec(_))));
    }

    #[test]
    fn inconsistent_marginal_is_rejected() {
        let mut spec = CohortSpec::registry_like(10, 1);
        spec.marginals.weight_kg.mean = 200.0;
        assert!(spec.validate().is_err());
        let mut spec = CohortSpec::registry_like(10, 1);
        spec.outcome_mechanism.coefficients.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn same_seed_is_reproducible_and_seeds_differ() {
        let a = synthesize_cohort(&CohortSpec::registry_like(200, 42)).unwrap();
        let b = synthesize_cohort(&CohortSpec::registry_like(200, 42)).unwrap();
        let c = synthesize_cohort(&CohortSpec::registry_like(200, 43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn male_count_near_registry_target() {
        // seed 42, n 681: male count within 3 binomial SDs of 375
        let records = synthesize_cohort(&CohortSpec::registry_like(681, 42)).unwrap();
        let males = records.iter().filter(|r| r.patient.sex == Sex::Male).count() as f64;
        let p: f64 = 375.0 / 681.0;
        let sd = (681.0 * p * (1.0 - p)).sqrt();
        assert!((males - 375.0).abs() <= 3.0 * sd, "males = {males}");
    }

    #[test]
    fn zero_mechanism_gives_uniform_outcomes() {
        let mut spec = CohortSpec::registry_like(6000, 3);
        spec.outcome_mechanism = OutcomeMechanism::zeros();
        let records = synthesize_cohort(&spec).unwrap();
        let n = records.len() as f64;
        let p: f64 = 1.0 / 6.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        for label in OutcomeLabel::ALL {
            let count = records.iter().filter(|r| r.outcome == label).count() as f64;
            assert!((count - n * p).abs() <= 3.0 * sd, "{label}: {count}");
        }
    }

    #[test]
    fn numeric_means_converge_to_targets() {
        let mut spec = CohortSpec::registry_like(20_000, 11);
        spec.completeness = Completeness::full();
        let records = synthesize_cohort(&spec).unwrap();
        let n = records.len() as f64;
        let mean = |f: &dyn Fn(&Patient) -> f64| records.iter().map(|r| f(&r.patient)).sum::<f64>() / n;
        // 4 standard errors, plus rounding of the recorded values
        let age = mean(&|p| p.age_years);
        assert!((age - 42.8).abs() < 4.0 * 13.0 / n.sqrt() + 0.05, "{age}");
        let weight = mean(&|p| p.weight_kg.unwrap());
        assert!((weight - 85.6).abs() < 4.0 * 18.0 / n.sqrt() + 0.05, "{weight}");
        let pasi = mean(&|p| p.baseline_pasi.unwrap());
        assert!((pasi - 10.5).abs() < 4.0 * 6.0 / n.sqrt() + 0.05, "{pasi}");
        for r in &records {
            assert!(r.patient.validate().is_ok());
            assert!(r.treatment_length_months >= 0.0);
            let w = r.patient.weight_kg.unwrap();
            assert!((30.0..=180.0).contains(&w));
        }
    }

    #[test]
    fn missingness_matches_completeness_targets() {
        let records = synthesize_cohort(&CohortSpec::registry_like(20_000, 5)).unwrap();
        let frac = records.iter().filter(|r| r.patient.weight_kg.is_some()).count() as f64 / 20_000.0;
        assert!((frac - 0.5727).abs() < 0.015, "{frac}");
        let frac = records.iter().filter(|r| r.patient.baseline_pasi.is_some()).count() as f64 / 20_000.0;
        assert!((frac - 0.0825).abs() < 0.01, "{frac}");
    }
}
