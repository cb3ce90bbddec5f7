use std::sync::Arc;

use drugsurv_core::cohort::{
    synthesize_cohort, Completeness, CohortSpec, Feature, FeatureKind, FeatureValue, OutcomeLabel, OutcomeMechanism, Patient,
    PatientRecord,
};
use drugsurv_core::learn::{fit, fit_glm, ModelArtifact, ModelConfig, ModelKind, Params};
use drugsurv_core::preprocess::{derive_schema_with, encode, SchemaMode, SchemaOptions};
use drugsurv_core::prescribe::{
    optimize_profile, reference_patient, Grid, JsonValue, OptimizeOptions, PrescribeError, Relation,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cohort(n: usize, seed: u64) -> Vec<PatientRecord> {
    synthesize_cohort(&CohortSpec::registry_like(n, seed)).unwrap()
}

fn glm_on(records: &[PatientRecord], features: Vec<Feature>) -> ModelArtifact<f64> {
    let schema = Arc::new(
        derive_schema_with(records, &SchemaOptions { mode: SchemaMode::Baseline, features }).unwrap(),
    );
    fit_glm(&encode::<f64>(records, &schema).unwrap(), &ModelConfig::default()).unwrap()
}

fn random_grid(feature: Feature, rng: &mut ChaCha8Rng) -> Grid {
    match feature.kind() {
        FeatureKind::Numeric => {
            let (lo, hi) = feature.observed_range().unwrap();
            let a = rng.random_range(lo..hi);
            let b = rng.random_range(a..=hi);
            Grid::numeric(feature, a, b, rng.random_range(2..=10))
        }
        _ => Grid::default_for(feature, 10),
    }
}

/// Maximum of P(target) over every feasible point of the product grid.
fn exhaustive(artifact: &ModelArtifact<f64>, grids: &[Grid], target: usize) -> f64 {
    let base = reference_patient(artifact);
    let mut best = f64::NEG_INFINITY;
    let mut idx = vec![0usize; grids.len()];
    loop {
        let mut p = base.clone();
        for (g, &i) in grids.iter().zip(&idx) {
            p.set(g.feature, g.values[i]);
        }
        if p.validate().is_ok() {
            let row = artifact.schema.encode_patient::<f64>(&p, None).unwrap();
            best = best.max(artifact.probabilities(row.values.view()).unwrap()[target]);
        }
        let mut k = 0;
        loop {
            if k == grids.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < grids[k].values.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn p_target(artifact: &ModelArtifact<f64>, p: &Patient, target: usize) -> f64 {
    let row = artifact.schema.encode_patient::<f64>(p, None).unwrap();
    artifact.probabilities(row.values.view()).unwrap()[target]
}

struct Instance {
    artifact: ModelArtifact<f64>,
    grids: Vec<Grid>,
    features: Vec<Feature>,
}

fn instances(records: &[PatientRecord], count: usize, seed: u64, perturb: bool) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let d = rng.random_range(1..=4);
            let mut features: Vec<Feature> =
                sample(&mut rng, Feature::ALL.len(), d).into_iter().map(|i| Feature::ALL[i]).collect();
            features.sort();
            let mut artifact = glm_on(records, features.clone());
            if perturb && i % 2 == 1 {
                if let Params::Linear { coefficients } = &mut artifact.params {
                    for row in coefficients.iter_mut() {
                        for c in row.iter_mut().skip(1) {
                            if *c != 0.0 {
                                *c = rng.random_range(-3.0..3.0);
                            }
                        }
                    }
                }
            }
            let grids = features.iter().map(|&f| random_grid(f, &mut rng)).collect();
            Instance { artifact, grids, features }
        })
        .collect()
}

/// Outcomes restricted to continue vs adverse event: every other class is
/// absent, so P(target) is monotone in a single additive score.
fn two_outcome_cohort() -> Vec<PatientRecord> {
    let mut mechanism = OutcomeMechanism::default();
    for (k, row) in mechanism.coefficients.iter_mut().enumerate() {
        if k != OutcomeLabel::AdverseEvent.index() && k != OutcomeLabel::Continue.index() {
            row.iter_mut().for_each(|c| *c = 0.0);
            row[0] = -1e3;
        }
    }
    synthesize_cohort(&CohortSpec {
        outcome_mechanism: mechanism,
        ..CohortSpec::registry_like(400, 5)
    })
    .unwrap()
}

#[test]
fn two_outcome_glm_matches_exhaustive_search() {
    let records = two_outcome_cohort();
    for (n, inst) in instances(&records, 40, 77, true).iter().enumerate() {
        for target in [OutcomeLabel::Continue, OutcomeLabel::AdverseEvent] {
            let opts = OptimizeOptions {
                target,
                grids: Some(inst.grids.clone()),
                ..OptimizeOptions::default()
            };
            let brute = exhaustive(&inst.artifact, &inst.grids, target.index());
            let r = match optimize_profile(&inst.artifact, &opts) {
                Err(PrescribeError::Infeasible) if brute == f64::NEG_INFINITY => continue,
                other => other.unwrap(),
            };
            assert!(
                (r.target_probability - brute).abs() <= 1e-12,
                "instance {n} {:?} {target}: {} vs {brute}",
                inst.features,
                r.target_probability
            );
        }
    }
}

#[test]
fn result_is_coordinatewise_optimal() {
    let records = cohort(400, 11);
    for inst in instances(&records, 40, 2024, true) {
        for target in [OutcomeLabel::Continue, OutcomeLabel::AdverseEvent] {
            let opts = OptimizeOptions {
                target,
                grids: Some(inst.grids.clone()),
                ..OptimizeOptions::default()
            };
            let r = match optimize_profile(&inst.artifact, &opts) {
                Err(PrescribeError::Infeasible) => continue,
                other => other.unwrap(),
            };
            let t = target.index();
            let at = p_target(&inst.artifact, &r.profile.patient, t);
            assert_eq!(at, r.target_probability);
            if r.sweeps == opts.max_sweeps {
                continue;
            }
            for g in &inst.grids {
                let mut p = r.profile.patient.clone();
                for &v in &g.values {
                    p.set(g.feature, v);
                    if p.validate().is_ok() {
                        assert!(p_target(&inst.artifact, &p, t) <= at, "{:?}", g.feature);
                    }
                }
            }
        }
    }
}

#[test]
fn planted_weight_step_is_recovered() {
    let mut mechanism = OutcomeMechanism::zeros();
    for row in mechanism.coefficients.iter_mut().take(5) {
        row[0] = -10.0;
    }
    // adverse events become likely above 100 kg
    mechanism.coefficients[0][0] = -4.0;
    mechanism.coefficients[0][3] = 8.0;
    let spec = CohortSpec {
        completeness: Completeness::full(),
        outcome_mechanism: mechanism,
        ..CohortSpec::registry_like(681, 42)
    };
    let records = synthesize_cohort(&spec).unwrap();
    let schema = Arc::new(
        derive_schema_with(
            &records,
            &SchemaOptions {
                mode: SchemaMode::Baseline,
                features: vec![Feature::WeightKg],
            },
        )
        .unwrap(),
    );
    let matrix = encode::<f64>(&records, &schema).unwrap();
    let artifact = fit(&matrix, &ModelConfig::new(ModelKind::Tree)).unwrap();
    let grid = Grid::default_for(Feature::WeightKg, 50);
    let step = match (grid.values[0], grid.values[1]) {
        (FeatureValue::Number(a), FeatureValue::Number(b)) => b - a,
        _ => unreachable!(),
    };
    let r = optimize_profile(&artifact, &OptimizeOptions::default()).unwrap();
    assert!(!r.target_unreachable);
    assert_eq!(r.constraints.len(), 1, "{:?}", r.constraints);
    let c = &r.constraints[0];
    assert_eq!(c.feature, Feature::WeightKg);
    assert_eq!(c.relation, Relation::AtMost);
    match c.boundary {
        JsonValue::Number(b) => assert!((b - 100.0).abs() <= step, "boundary {b}, step {step}"),
        ref other => panic!("{other:?}"),
    }
    assert!(c.probability >= 0.9);
    assert_eq!(c.to_string().split(' ').nth(1), Some("≤"));
}
