//! Small dense symmetric eigensolver and helpers.
//!
//! Everything in the pipeline that needs spectra works on matrices of at most
//! a few hundred entries per side (Gram matrices of difference rows, feature
//! covariances), so a cyclic Jacobi sweep is accurate and fast enough. No
//! LAPACK binding is pulled in.

use ndarray::{Array1, Array2};

/// Eigenvalues (descending) and matching eigenvectors (columns) of a
/// symmetric matrix, computed with cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Array1<f64>,
    /// Column `j` is the eigenvector for `values[j]`.
    pub vectors: Array2<f64>,
}

/// Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(A + A^T) / 2` so tiny asymmetries from
/// accumulated products do not leak in. Panics if `a` is not square.
pub fn sym_eigen(a: &Array2<f64>) -> SymEigen {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = Array2::<f64>::eye(n);

    let max_sweeps = 64;
    let tol = 1e-14;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= tol * (frob(&m) + f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                // classic Jacobi rotation computed via the stable t-formula
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
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

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let values = Array1::from_iter(idx.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (col, &i) in idx.iter().enumerate() {
        for r in 0..n {
            vectors[[r, col]] = v[[r, i]];
        }
    }
    SymEigen { values, vectors }
}

/// Frobenius norm.
pub fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Symmetric positive-semidefinite square root via the eigendecomposition.
/// Negative eigenvalues from roundoff are clamped to zero.
pub fn sym_sqrt(a: &Array2<f64>) -> Array2<f64> {
    let eig = sym_eigen(a);
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = eig.values[k].max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += lam * eig.vectors[[i, k]] * eig.vectors[[j, k]];
            }
        }
    }
    out
}

/// Cosine of the angle between two vectors; 0 if either is zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Inverse of a 3x3 matrix; `None` when the determinant is ~0.
pub fn inv3(m: &Array2<f64>) -> Option<Array2<f64>> {
    assert_eq!(m.shape(), &[3, 3]);
    let a = m[[0, 0]];
    let b = m[[0, 1]];
    let c = m[[0, 2]];
    let d = m[[1, 0]];
    let e = m[[1, 1]];
    let f = m[[1, 2]];
    let g = m[[2, 0]];
    let h = m[[2, 1]];
    let i = m[[2, 2]];
    let det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = Array2::<f64>::zeros((3, 3));
    out[[0, 0]] = (e * i - f * h) * inv_det;
    out[[0, 1]] = (c * h - b * i) * inv_det;
    out[[0, 2]] = (b * f - c * e) * inv_det;
    out[[1, 0]] = (f * g - d * i) * inv_det;
    out[[1, 1]] = (a * i - c * g) * inv_det;
    out[[1, 2]] = (c * d - a * f) * inv_det;
    out[[2, 0]] = (d * h - e * g) * inv_det;
    out[[2, 1]] = (b * g - a * h) * inv_det;
    out[[2, 2]] = (a * e - b * d) * inv_det;
    Some(out)
}

/// 3x3 matrix product.
pub fn mat3_mul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    a.dot(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn eigen_diagonal() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let e = sym_eigen(&a);
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for n in [1usize, 2, 5, 16] {
            let mut a = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..=i {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    a[[i, j]] = x;
                    a[[j, i]] = x;
                }
            }
            let e = sym_eigen(&a);
            // V diag(w) V^T == A
            let mut rec = Array2::<f64>::zeros((n, n));
            for k in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        rec[[i, j]] += e.values[k] * e.vectors[[i, k]] * e.vectors[[j, k]];
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    assert!((rec[[i, j]] - a[[i, j]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn eigen_matches_nalgebra() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 12;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.gen_range(-1.0..1.0);
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        let mine = sym_eigen(&a);
        let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
        let theirs = na.symmetric_eigen();
        let mut tv: Vec<f64> = theirs.eigenvalues.iter().copied().collect();
        tv.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for k in 0..n {
            assert!((mine.values[k] - tv[k]).abs() < 1e-9, "eigenvalue {k}");
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let r = sym_sqrt(&a);
        let sq = r.dot(&r);
        for i in 0..2 {
            for j in 0..2 {
                assert!((sq[[i, j]] - a[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn inv3_roundtrip() {
        let m = array![[2.0, 1.0, 0.5], [0.0, 1.5, -1.0], [0.3, 0.0, 1.0]];
        let inv = inv3(&m).unwrap();
        let id = m.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id[[i, j]] - want).abs() < 1e-12);
            }
        }
    }
}
