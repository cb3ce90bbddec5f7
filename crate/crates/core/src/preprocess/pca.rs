use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, PreprocessError};
use crate::linalg::{covariance, symmetric_eigen};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaScreenReport<F> {
    pub columns: Vec<String>,
    /// Non-increasing, clamped at zero.
    pub eigenvalues: Vec<F>,
    pub explained_ratio: Vec<F>,
    pub retained: usize,
    /// Per column, the largest |loading| over the retained components.
    pub max_loading: Vec<F>,
    pub dropped: Vec<String>,
    pub variance_threshold: F,
    pub loading_floor: F,
}

impl<F: Scalar> PcaScreenReport<F> {
    pub fn cumulative_ratio(&self) -> Vec<F> {
        self.explained_ratio
            .iter()
            .scan(F::zero(), |acc, &r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }

    /// `component,eigenvalue,ratio,cumulative_ratio`, components numbered from 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "component,eigenvalue,ratio,cumulative_ratio")?;
        for (i, ((e, r), c)) in self
            .eigenvalues
            .iter()
            .zip(&self.explained_ratio)
            .zip(self.cumulative_ratio())
            .enumerate()
        {
            writeln!(w, "{},{},{},{}", i + 1, e, r, c)?;
        }
        Ok(())
    }
}

pub fn pca_screen_matrix<F: Scalar>(
    matrix: &FeatureMatrix<F>,
    variance_threshold: F,
    loading_floor: F,
) -> Result<PcaScreenReport<F>, PreprocessError> {
    pca_screen(
        matrix.x.view(),
        &matrix.schema.column_names(),
        variance_threshold,
        loading_floor,
    )
}

/// Eigen-decomposes the sample covariance of `x`, keeps the smallest number
/// of components reaching `variance_threshold` of the total variance and
/// drops columns whose loadings on every kept component stay below
/// `loading_floor`.
pub fn pca_screen<F: Scalar>(
    x: ArrayView2<'_, F>,
    names: &[String],
    variance_threshold: F,
    loading_floor: F,
) -> Result<PcaScreenReport<F>, PreprocessError> {
    let (n, d) = x.dim();
    if n <= 1 {
        return Err(PreprocessError::DegenerateCovariance(format!("{n} rows")));
    }
    if d == 0 || names.len() != d {
        return Err(PreprocessError::InvalidArgument(format!(
            "{} names for {d} columns",
            names.len()
        )));
    }
    if !(variance_threshold > F::zero() && variance_threshold <= F::one()) {
        return Err(PreprocessError::InvalidArgument(
            "variance threshold must lie in (0, 1]".into(),
        ));
    }
    let cov = covariance(x);
    let trace: F = (0..d).map(|i| cov[[i, i]]).sum();
    if !(trace > F::zero()) {
        return Err(PreprocessError::DegenerateCovariance("zero total variance".into()));
    }
    let eig = symmetric_eigen(&cov, F::epsilon(), 100);
    let eigenvalues: Vec<F> = eig.values.iter().map(|&v| v.max(F::zero())).collect();
    let total: F = eigenvalues.iter().copied().sum();
    let explained_ratio: Vec<F> = eigenvalues.iter().map(|&v| v / total).collect();

    let mut retained = d;
    let mut acc = F::zero();
    for (k, &r) in explained_ratio.iter().enumerate() {
        acc += r;
        // small slack so that ratios summing to the threshold in exact
        // arithmetic are not lost to rounding
        if acc >= variance_threshold - F::epsilon() * F::lit(16.0) {
            retained = k + 1;
            break;
        }
    }

    let max_loading: Vec<F> = (0..d)
        .map(|j| {
            (0..retained)
                .map(|k| eig.vectors[[j, k]].abs())
                .fold(F::zero(), F::max)
        })
        .collect();
    let dropped = names
        .iter()
        .zip(&max_loading)
        .filter(|(_, &l)| l < loading_floor)
        .map(|(n, _)| n.clone())
        .collect();
    Ok(PcaScreenReport {
        columns: names.to_vec(),
        eigenvalues,
        explained_ratio,
        retained,
        max_loading,
        dropped,
        variance_threshold,
        loading_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn points_on_a_line_are_rank_one() {
        let x = array![[0.0f64, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let r = pca_screen(x.view(), &names(2), 0.95, 0.1).unwrap();
        assert!((r.explained_ratio[0] - 1.0).abs() < 1e-12);
        assert!(r.explained_ratio[1].abs() < 1e-12);
        assert_eq!(r.retained, 1);
    }

    #[test]
    fn single_row_is_degenerate() {
        let x = array![[1.0f64, 2.0]];
        assert!(matches!(
            pca_screen(x.view(), &names(2), 0.95, 0.1),
            Err(PreprocessError::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn csv_has_one_line_per_component() {
        let x = array![[0.0f64, 1.0], [1.0, 0.0], [2.0, 2.5]];
        let r = pca_screen(x.view(), &names(2), 0.95, 0.1).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("component,eigenvalue,ratio,cumulative_ratio\n1,"));
    }

    #[test]
    fn tiny_decoupled_column_is_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let mut x = Array2::<f64>::zeros((n, 4));
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            x[[i, 0]] = z + 0.3 * a;
            x[[i, 1]] = z - 0.3 * a;
            x[[i, 2]] = b;
            x[[i, 3]] = 1e-3 * e;
        }
        for floor in [0.01, 0.05, 0.1, 0.2] {
            let r = pca_screen(x.view(), &names(4), 0.95, floor).unwrap();
            assert_eq!(r.dropped, vec!["x3".to_string()], "floor {floor}");
        }
    }
}
