//! Small dense symmetric matrices in `f64`: cyclic Jacobi eigendecomposition
//! and the functions built on it.

use crate::error::{Error, Result};

/// Sweep limit for [`sym_eigen`].
pub const MAX_SWEEPS: usize = 100;

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("matrix rows must all have length n"));
        }
        Ok(Matrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        let mut t = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t.data[j * n + i] = self.data[i * n + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let n = self.n;
        assert_eq!(n, other.n, "matmul of {n}x{n} and {0}x{0}", other.n);
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    /// Largest `|a_ij − a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst = 0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let n = self.n;
        let mut s = self.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        s
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector of `values[k]`.
    pub vectors: Matrix,
}

impl Eigen {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.vectors.n;
        let mut out = Matrix::zeros(n);
        for k in 0..n {
            let w = f(self.values[k]);
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let vi = self.vectors.get(i, k) * w;
                for j in 0..n {
                    out.data[i * n + j] += vi * self.vectors.get(j, k);
                }
            }
        }
        out
    }
}

fn off_diagonal(a: &Matrix) -> f64 {
    let n = a.n;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j).powi(2);
            }
        }
    }
    s
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eigen(a: &Matrix) -> Result<Eigen> {
    let n = a.n;
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("eigendecomposition of a non-finite matrix"));
    }
    let mut a = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.data.iter().map(|x| x * x).sum::<f64>();
    let tol = (1e-30 * scale).max(f64::MIN_POSITIVE);
    let mut converged = off_diagonal(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a.get(p, p), a.get(q, q));
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        converged = off_diagonal(&a) <= tol;
    }
    if !converged {
        return Err(Error::EigenNoConvergence { sweeps });
    }
    Ok(Eigen {
        values: (0..n).map(|i| a.get(i, i)).collect(),
        vectors: v,
    })
}

/// Eigenvalues at or above `-tol` are clamped to 0; anything more negative
/// is rejected.
pub fn clamp_psd(values: &[f64], tol: f64) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&l| {
            if l >= 0.0 {
                Ok(l)
            } else if l >= -tol {
                Ok(0.0)
            } else {
                Err(Error::NotPsd { eigenvalue: l })
            }
        })
        .collect()
}

/// Principal square root of a PSD matrix.
pub fn sqrtm_psd(a: &Matrix, tol: f64) -> Result<Matrix> {
    let mut e = sym_eigen(a)?;
    e.values = clamp_psd(&e.values, tol)?;
    Ok(e.reconstruct(f64::sqrt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_sym(n: usize, seed: u64) -> Matrix {
        let mut r = crate::rng::rng(seed);
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let v = r.random_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn two_by_two_by_hand() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3
        let e = sym_eigen(&Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap()).unwrap();
        let mut vals = e.values.clone();
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn reconstructs_random_matrices() {
        for (n, seed) in [(1, 0), (3, 1), (10, 2), (64, 3)] {
            let a = random_sym(n, seed);
            let e = sym_eigen(&a).unwrap();
            assert!(max_diff(&e.reconstruct(|l| l), &a) < 1e-10, "n = {n}");
            let vtv = e.vectors.transpose().matmul(&e.vectors);
            assert!(max_diff(&vtv, &Matrix::identity(n)) < 1e-10);
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let b = random_sym(12, 4);
        let a = b.matmul(&b.transpose());
        let s = sqrtm_psd(&a, 1e-6).unwrap();
        assert!(max_diff(&s.matmul(&s), &a) < 1e-9);
    }

    #[test]
    fn clamp_tolerance() {
        assert_eq!(clamp_psd(&[1.0, -5e-7], 1e-6).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(clamp_psd(&[-1e-3], 1e-6), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn diagonal_is_already_converged() {
        let e = sym_eigen(&Matrix::diag(&[3.0, -1.0, 0.0])).unwrap();
        assert_eq!(e.values, vec![3.0, -1.0, 0.0]);
        assert_eq!(e.vectors, Matrix::identity(3));
    }
}
