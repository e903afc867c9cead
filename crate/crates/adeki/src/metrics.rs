//! Small dense symmetric linear algebra used by the inference layers:
//! cyclic Jacobi eigendecomposition, Cholesky solves, and the
//! eigenvalue-floor policy applied before log-determinants and inverses of
//! near-singular ensemble covariances. Matrices here are at most a few dozen
//! rows, so simplicity and determinism win over BLAS.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Average away floating-point asymmetry accumulated by outer-product sums.
pub fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Eigenvalues ascend; eigenvectors are the matching columns.
pub fn sym_eigen(m: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Config(format!("sym_eigen needs a square matrix, got {}x{}", n, m.ncols())));
    }
    let mut a = m.to_owned();
    let mut v = Array2::eye(n);
    let off = |a: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[[i, j]] * a[[i, j]];
            }
        }
        s.sqrt()
    };
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(1e-300, f64::max);
    let tol = 1e-14 * scale.max(off(&a));
    for _sweep in 0..100 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
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
    order.sort_by(|&i, &j| a[[i, i]].partial_cmp(&a[[j, j]]).unwrap());
    let eigvals = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut eigvecs = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[[k, col]] = v[[k, i]];
        }
    }
    Ok((eigvals, eigvecs))
}

pub fn sym_eigvals(m: &ArrayView2<f64>) -> Result<Array1<f64>> {
    sym_eigen(m).map(|(vals, _)| vals)
}

/// Symmetric matrix seen through its eigendecomposition with eigenvalues
/// clipped at a floor. Centralizes how near-singular covariances are
/// inverted and log-det'ed so the two stay consistent.
pub struct SpdView {
    pub eigvals: Array1<f64>,
    pub eigvecs: Array2<f64>,
    /// Number of eigenvalues raised to the floor.
    pub clipped: usize,
}

impl SpdView {
    pub fn new(m: &ArrayView2<f64>, floor: f64) -> Result<Self> {
        let (mut eigvals, eigvecs) = sym_eigen(m)?;
        let mut clipped = 0;
        for v in eigvals.iter_mut() {
            if *v < floor {
                *v = floor;
                clipped += 1;
            }
        }
        Ok(Self { eigvals, eigvecs, clipped })
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    pub fn logdet(&self) -> f64 {
        self.eigvals.iter().map(|v| v.ln()).sum()
    }

    pub fn inverse(&self) -> Array2<f64> {
        let n = self.dim();
        let mut out = Array2::zeros((n, n));
        for k in 0..n {
            let w = 1.0 / self.eigvals[k];
            for i in 0..n {
                for j in 0..n {
                    out[[i, j]] += w * self.eigvecs[[i, k]] * self.eigvecs[[j, k]];
                }
            }
        }
        out
    }

    /// M^{-1} x.
    pub fn solve(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        let mut out = Array1::zeros(n);
        for k in 0..n {
            let proj: f64 = (0..n).map(|i| self.eigvecs[[i, k]] * x[i]).sum();
            let w = proj / self.eigvals[k];
            for i in 0..n {
                out[i] += w * self.eigvecs[[i, k]];
            }
        }
        out
    }

    /// tr(M^{-1} B).
    pub fn trace_solve(&self, b: &ArrayView2<f64>) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for k in 0..n {
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += self.eigvecs[[i, k]] * b[[i, j]] * self.eigvecs[[j, k]];
                }
            }
            acc += quad / self.eigvals[k];
        }
        acc
    }
}

/// Eigenvalue floor used for covariance regularization: a small fraction of
/// the mean eigenvalue, with an absolute fallback for zero matrices.
pub fn covariance_floor(m: &ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    let tr: f64 = (0..n).map(|i| m[[i, i]]).sum();
    (1e-8 * tr / n as f64).max(1e-300)
}

/// Lower-triangular Cholesky factor of a positive-definite matrix.
pub fn cholesky(m: &ArrayView2<f64>, context: &'static str) -> Result<Array2<f64>> {
    let n = m.nrows();
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { context });
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve M x = b given the Cholesky factor of M.
pub fn chol_solve(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve M X = B column by column given the Cholesky factor of M.
pub fn chol_solve_mat(l: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let m = b.ncols();
    let mut out = Array2::zeros((n, m));
    for c in 0..m {
        let col = chol_solve(l, &b.column(c));
        for r in 0..n {
            out[[r, c]] = col[r];
        }
    }
    out
}

/// Geometric-mean standard deviation of a 2x2 covariance:
/// (lambda_1 * lambda_2)^(1/4).
pub fn equivalent_std(cov2: &ArrayView2<f64>) -> Result<f64> {
    if cov2.nrows() != 2 || cov2.ncols() != 2 {
        return Err(Error::Config("equivalent_std expects a 2x2 covariance".into()));
    }
    let vals = sym_eigvals(cov2)?;
    let prod = vals[0].max(0.0) * vals[1].max(0.0);
    Ok(prod.powf(0.25))
}

/// log N(x; mean, var) for scalar observations.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (d * d / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut m = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        m
    }

    #[test]
    fn jacobi_matches_nalgebra_on_random_symmetric() {
        for seed in 0..20u64 {
            let n = 2 + (seed as usize % 7) * 5; // up to 32
            let m = random_symmetric(n, seed);
            let mine = sym_eigvals(&m.view()).unwrap();
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| m[[i, j]]);
            let mut theirs: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
            theirs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for k in 0..n {
                assert_relative_eq!(mine[k], theirs[k], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn eigenvectors_reconstruct_the_matrix() {
        let m = random_symmetric(12, 99);
        let (vals, vecs) = sym_eigen(&m.view()).unwrap();
        let n = 12;
        for i in 0..n {
            for j in 0..n {
                let mut rec = 0.0;
                for k in 0..n {
                    rec += vals[k] * vecs[[i, k]] * vecs[[j, k]];
                }
                assert_relative_eq!(rec, m[[i, j]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn logdet_of_identity_is_zero_and_scaling_shifts_it() {
        let eye = Array2::<f64>::eye(4);
        let view = SpdView::new(&eye.view(), 1e-300).unwrap();
        assert_relative_eq!(view.logdet(), 0.0, epsilon = 1e-12);
        let scaled = &eye * 3.0;
        let view3 = SpdView::new(&scaled.view(), 1e-300).unwrap();
        assert_relative_eq!(view3.logdet(), 4.0 * 3.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn clipping_counts_near_zero_eigenvalues() {
        // rank-1 matrix: one positive eigenvalue, two at zero
        let v = array![1.0, 2.0, -1.0];
        let mut m = Array2::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                m[[i, j]] = v[i] * v[j];
            }
        }
        let view = SpdView::new(&m.view(), 1e-6).unwrap();
        assert_eq!(view.clipped, 2, "two zero eigenvalues hit the floor");
        assert_relative_eq!(view.eigvals[2], 6.0, epsilon = 1e-9);
    }

    #[test]
    fn cholesky_solve_round_trips() {
        let m = {
            let a = random_symmetric(6, 3);
            // make it SPD: A A^T + I
            let mut spd = Array2::eye(6);
            for i in 0..6 {
                for j in 0..6 {
                    let mut s = 0.0;
                    for k in 0..6 {
                        s += a[[i, k]] * a[[j, k]];
                    }
                    spd[[i, j]] += s;
                }
            }
            spd
        };
        let l = cholesky(&m.view(), "test").unwrap();
        let b = array![1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let x = chol_solve(&l.view(), &b.view());
        let back = m.dot(&x);
        for i in 0..6 {
            assert_relative_eq!(back[i], b[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            cholesky(&m.view(), "test"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn equivalent_std_of_isotropic_covariance_is_sigma() {
        let m = array![[0.09, 0.0], [0.0, 0.09]];
        assert_relative_eq!(equivalent_std(&m.view()).unwrap(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn spd_view_inverse_matches_solve() {
        let m = {
            let mut m = random_symmetric(5, 11);
            for i in 0..5 {
                m[[i, i]] += 5.0;
            }
            m
        };
        let view = SpdView::new(&m.view(), 1e-300).unwrap();
        let inv = view.inverse();
        let b = array![0.3, -1.0, 2.0, 0.7, -0.2];
        let x1 = view.solve(&b.view());
        let x2 = inv.dot(&b);
        for i in 0..5 {
            assert_relative_eq!(x1[i], x2[i], epsilon = 1e-10);
        }
        let tr1 = view.trace_solve(&m.view());
        assert_relative_eq!(tr1, 5.0, epsilon = 1e-9, max_relative = 1e-9);
    }
}
