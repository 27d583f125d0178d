use super::matrix::{axpy, dot, norm, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `M = U · diag(sigma) · Vᵀ`.
///
/// For an `m×n` input with `k = min(m, n)`, `u` is `m×k`, `v` is `n×k`, and
/// `sigma` has `k` non-negative entries in descending order. Columns of `u`
/// and `v` are orthonormal even when `M` is rank deficient.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// One-sided Jacobi SVD.
///
/// Each left singular vector is flipped so that its first nonzero component
/// is positive, and its right partner is flipped with it.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(
            "svd input contains NaN or infinity".into(),
        ));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        let mut out = Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        canonical_signs(&mut out);
        return Ok(out);
    }

    let (rows, n) = m.shape();
    // Work on columns: a[j] is column j of the evolving U·Σ, w[j] of V.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut w, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let tiny = smax * (rows.max(n) as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(rows, n);
    let mut v = Matrix::zeros(n, n);
    let mut sorted = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = sigma[j];
        if s > tiny && s > 0.0 {
            let col: Vec<f64> = a[j].iter().map(|x| x / s).collect();
            u.set_col(k, &col);
            sorted.push(s);
        } else {
            deficient.push(k);
            sorted.push(0.0);
        }
        v.set_col(k, &w[j]);
    }
    sigma = sorted;
    if !deficient.is_empty() {
        complete_columns(&mut u, &deficient);
    }
    let mut out = Svd { u, sigma, v };
    canonical_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to all
/// other columns, trying standard basis vectors in order.
fn complete_columns(u: &mut Matrix, missing: &[usize]) {
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < rows, "cannot complete orthonormal basis");
            let mut e = vec![0.0; rows];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes keep the result orthogonal to 1e-15.
            for _ in 0..2 {
                for &j in &filled {
                    let c = u.col(j);
                    let d = dot(&e, &c);
                    axpy(&mut e, -d, &c);
                }
            }
            let n = norm(&e);
            if n > 1e-6 {
                e.iter_mut().for_each(|x| *x /= n);
                u.set_col(k, &e);
                filled.push(k);
                break;
            }
        }
    }
}

fn canonical_signs(s: &mut Svd) {
    for k in 0..s.sigma.len() {
        let col = s.u.col(k);
        let scale = norm(&col);
        let first = col.iter().find(|x| x.abs() > 1e-12 * scale.max(1.0));
        if matches!(first, Some(x) if *x < 0.0) {
            for i in 0..s.u.rows() {
                s.u[(i, k)] = -s.u[(i, k)];
            }
            for i in 0..s.v.rows() {
                s.v[(i, k)] = -s.v[(i, k)];
            }
        }
    }
}
