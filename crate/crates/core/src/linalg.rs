//! Small dense kernels: Cholesky solves, sample covariance and a cyclic
//! Jacobi eigensolver for symmetric matrices.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Solves `a x = b` for symmetric positive-definite `a`.
///
/// Returns `None` when a pivot is not strictly positive (the matrix is
/// singular or indefinite to working precision).
pub fn cholesky_solve<F: Scalar>(a: &Array2<F>, b: &Array1<F>) -> Option<Array1<F>> {
    let n = a.nrows();
    debug_assert_eq!(a.ncols(), n);
    debug_assert_eq!(b.len(), n);
    let mut l = Array2::<F>::zeros((n, n));
    // relative pivot floor: rejects numerically singular systems
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(F::zero(), F::max);
    let floor = scale * F::epsilon() * F::from_count(n.max(1));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > floor) {
            return None;
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    let mut y = Array1::<F>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<F>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Some(x)
}

/// Sample covariance (n − 1 denominator) of the columns of `x`.
pub fn covariance<F: Scalar>(x: ArrayView2<'_, F>) -> Array2<F> {
    let n = x.nrows();
    let means = x.mean_axis(Axis(0)).expect("non-empty matrix");
    let centered = &x - &means.insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered);
    cov.mapv_inplace(|v| v / F::from_count(n - 1));
    cov
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<F> {
    /// Eigenvalues in non-increasing order.
    pub values: Array1<F>,
    /// Unit eigenvectors stored as columns, aligned with `values`.
    pub vectors: Array2<F>,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm falls
/// below `tol` times the matrix norm, or `max_sweeps` is reached.
pub fn symmetric_eigen<F: Scalar>(a: &Array2<F>, tol: F, max_sweeps: usize) -> SymmetricEigen<F> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<F>::eye(n);
    let norm = m.iter().map(|&x| x * x).sum::<F>().sqrt();
    let two = F::lit(2.0);
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol * norm || off == F::zero() {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == F::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<F>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    SymmetricEigen { values, vectors, sweeps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0f64, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let x_true = array![1.0, -2.0, 0.5];
        let b = a.dot(&x_true);
        let x = cholesky_solve(&a, &b).unwrap();
        for (u, v) in x.iter().zip(x_true.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky_solve(&a, &array![1.0, 1.0]).is_none());
    }

    #[test]
    fn jacobi_diagonalizes_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let a = array![[2.0f64, 1.0], [1.0, 2.0]];
        let eig = symmetric_eigen(&a, 1e-14, 50);
        assert!((eig.values[0] - 3.0).abs() < 1e-12);
        assert!((eig.values[1] - 1.0).abs() < 1e-12);
        let v0 = eig.vectors.column(0);
        assert!((v0[0].abs() - v0[1].abs()).abs() < 1e-12);
    }

    #[test]
    fn covariance_matches_hand_computation() {
        let x = array![[1.0f64, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let c = covariance(x.view());
        assert!((c[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((c[[0, 1]] - 2.0).abs() < 1e-12);
        assert!((c[[1, 1]] - 4.0).abs() < 1e-12);
    }
}
