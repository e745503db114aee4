//! Small dense `f64` matrices and a cyclic Jacobi eigensolver for symmetric
//! matrices. Everything here is deterministic: fixed sweep order, fixed sort
//! and sign conventions.

use crate::error::{Result, SaakError};

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatF64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatF64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatF64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = MatF64::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted
/// non-increasing and `eigenvectors[i]` the unit eigenvector for
/// `eigenvalues[i]`. Sign convention: the component of largest magnitude in
/// each eigenvector is positive (ties broken by lowest index).
pub fn symmetric_eig(r: &MatF64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = r.rows;
    if r.cols != n {
        return Err(SaakError::Domain(format!(
            "eigensolver needs a square matrix, got {}x{}",
            r.rows, r.cols
        )));
    }
    let scale = r.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (r.get(i, j) - r.get(j, i)).abs() > 1e-6 * scale {
                return Err(SaakError::Domain(format!(
                    "matrix is not symmetric at ({}, {}): {} vs {}",
                    i,
                    j,
                    r.get(i, j),
                    r.get(j, i)
                )));
            }
        }
    }

    let mut a = r.clone();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = MatF64::identity(n);

    let tol = 1e-14 * scale;
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // stable tangent of the rotation angle
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        return Err(SaakError::Numeric(format!(
            "Jacobi eigensolver did not converge within {} sweeps",
            MAX_SWEEPS
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Vec::with_capacity(n);
    for &col in &order {
        eigenvalues.push(a.get(col, col));
        let mut vec: Vec<f64> = (0..n).map(|row| v.get(row, col)).collect();
        fix_sign(&mut vec);
        eigenvectors.push(vec);
    }
    Ok((eigenvalues, eigenvectors))
}

/// Make the largest-magnitude component positive (ties: lowest index).
pub fn fix_sign(vec: &mut [f64]) {
    let mut best = 0;
    for (i, &v) in vec.iter().enumerate() {
        if v.abs() > vec[best].abs() {
            best = i;
        }
    }
    if vec[best] < 0.0 {
        for v in vec.iter_mut() {
            *v = -*v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
