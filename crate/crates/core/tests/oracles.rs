use approx::assert_relative_eq;
use drugsurv_core::cohort::OutcomeLabel;
use drugsurv_core::evaluate::{bland_altman, kfold_split, roc_from_scores};
use drugsurv_core::learn::{fit, ModelConfig, ModelKind, Params};
use drugsurv_core::preprocess::{pca_screen, FeatureMatrix};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // correlated columns so the spectrum is not flat
    let mix: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for j in 0..d {
            x[[i, j]] = (0..d).map(|k| mix[j * d + k] * z[k]).sum::<f64>();
        }
    }
    x
}

#[test]
fn pca_eigenvalues_match_nalgebra() {
    for seed in 0..10 {
        let (n, d) = (60, 7);
        let x = random_matrix(n, d, seed);
        let names: Vec<String> = (0..d).map(|j| format!("c{j}")).collect();
        let report = pca_screen(x.view(), &names, 0.95, 0.1).unwrap();

        let m = DMatrix::from_fn(n, d, |i, j| x[[i, j]]);
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let mut expected: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0)).collect();
        expected.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (got, want) in report.eigenvalues.iter().zip(&expected) {
            assert_relative_eq!(*got, *want, epsilon = 1e-9, max_relative = 1e-9);
        }
        let total: f64 = report.explained_ratio.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn length_glm_matches_least_squares() {
    for seed in 0..10 {
        let (n, d) = (80, 5);
        let x = random_matrix(n, d, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n)
            .map(|i| 30.0 + (0..d).map(|j| (j as f64 + 1.0) * x[[i, j]]).sum::<f64>() + rng.random_range(-2.0..2.0))
            .collect();
        let names: Vec<String> = (0..d).map(|j| format!("c{j}")).collect();
        let m = FeatureMatrix::from_raw(x.clone(), vec![], y.clone(), &names).unwrap();
        let config = ModelConfig {
            lambda: 0.0,
            ..ModelConfig::new(ModelKind::LengthGlm)
        };
        let art = fit(&m, &config).unwrap();
        let Params::Length { coefficients } = &art.params else { panic!("not a length model") };

        let z = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
        let beta = z.svd(true, true).solve(&DVector::from_vec(y), 1e-12).unwrap();
        for (got, want) in coefficients.iter().zip(beta.iter()) {
            assert_relative_eq!(*got, *want, epsilon = 1e-8, max_relative = 1e-8);
        }
    }
}

#[test]
fn forest_fits_training_data_at_least_as_well_as_a_stump() {
    let x = random_matrix(300, 4, 9);
    let labels: Vec<OutcomeLabel> = (0..300)
        .map(|i| {
            let s = x[[i, 0]] + x[[i, 1]] * x[[i, 2]];
            if s > 0.5 {
                OutcomeLabel::Continue
            } else if s < -0.5 {
                OutcomeLabel::AdverseEvent
            } else {
                OutcomeLabel::LackOfEfficacy
            }
        })
        .collect();
    let names = ["a", "b", "c", "d"];
    let m = FeatureMatrix::from_raw(x, labels.clone(), vec![], &names).unwrap();
    let accuracy = |config: &ModelConfig| {
        let art = fit(&m, config).unwrap();
        let p = art.predict_proba_matrix(&m).unwrap();
        let hits = p
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(row, l)| {
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                best == l.index()
            })
            .count();
        hits as f64 / labels.len() as f64
    };
    let stump = accuracy(&ModelConfig {
        max_depth: 1,
        ..ModelConfig::new(ModelKind::Tree)
    });
    let forest = accuracy(&ModelConfig {
        n_trees: 50,
        seed: 3,
        ..ModelConfig::new(ModelKind::Forest)
    });
    assert!(forest >= stump, "forest {forest} stump {stump}");
}

fn pair_count_auc(positive: &[bool], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn auc_equals_pair_counting(data in prop::collection::vec((any::<bool>(), 0u8..8), 2..60)) {
        let positive: Vec<bool> = data.iter().map(|d| d.0).collect();
        let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 8.0).collect();
        prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
        let (points, auc) = roc_from_scores(&positive, &scores).unwrap();
        prop_assert!((auc - pair_count_auc(&positive, &scores)).abs() < 1e-12);
        prop_assert_eq!(points.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(points.last().copied(), Some((1.0, 1.0)));
        for w in points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn folds_partition_rows(n in 2usize..300, k in 2usize..11, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = kfold_split(n, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(folds, kfold_split(n, k, seed).unwrap());
    }

    #[test]
    fn bland_altman_bias_is_mean_difference(pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 2..80)) {
        let actual: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let predicted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = bland_altman(&actual, &predicted).unwrap();
        let mean = pairs.iter().map(|p| p.0 - p.1).sum::<f64>() / pairs.len() as f64;
        prop_assert!((r.bias - mean).abs() < 1e-9);
        prop_assert!((r.upper - r.bias - 1.96 * r.sd).abs() < 1e-9);
        prop_assert!((r.bias - r.lower - 1.96 * r.sd).abs() < 1e-9);
        prop_assert!(r.mae >= r.bias.abs() - 1e-9);
    }
}
