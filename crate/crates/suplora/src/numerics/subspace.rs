use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use super::svd::svd;
use crate::error::{Error, Result};

/// Orthonormal row basis of a subspace of ℝᵈ.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis {
    /// One unit vector per row.
    pub vectors: Matrix,
    /// Numerical rank of the matrix the basis was extracted from.
    pub source_rank: usize,
    /// Share of squared singular-value energy captured by the basis.
    pub capture_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapturePoint {
    pub rank: usize,
    pub ratio: f64,
}

impl SubspaceBasis {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn rank(&self) -> usize {
        self.vectors.rows()
    }

    /// Largest deviation of `V·Vᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.vectors.matmul(&self.vectors.transpose());
        g.sub(&Matrix::identity(self.rank())).max_abs()
    }

    /// Coordinates of `h` in the basis, `V·h`.
    pub fn coords(&self, h: &[f64]) -> Vec<f64> {
        self.vectors.matvec(h)
    }

    /// `(I − VᵀV)·h`
    pub fn residual(&self, h: &[f64]) -> Vec<f64> {
        let c = self.coords(h);
        let back = self.vectors.tr_matvec(&c);
        h.iter().zip(back).map(|(a, b)| a - b).collect()
    }
}

fn energy_prefix(sigma: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc
        })
        .collect()
}

fn numerical_rank(sigma: &[f64], rows: usize, cols: usize) -> usize {
    let tol = sigma.first().copied().unwrap_or(0.0) * rows.max(cols) as f64 * f64::EPSILON;
    sigma.iter().filter(|s| **s > tol).count()
}

/// First `r_s` left singular vectors of the column-sample matrix `h` (`d×n`).
pub fn principal_subspace(h: &Matrix, r_s: usize) -> Result<SubspaceBasis> {
    let (d, n) = h.shape();
    if r_s == 0 || r_s > d.min(n) {
        return Err(Error::Rank(format!(
            "principal rank {r_s} outside 1..={} for a {d}x{n} sample matrix",
            d.min(n)
        )));
    }
    let s = svd(h)?;
    let prefix = energy_prefix(&s.sigma);
    let total = *prefix.last().unwrap();
    let capture_ratio = if total > 0.0 {
        prefix[r_s - 1] / total
    } else {
        0.0
    };
    let vectors = s.u.select_cols(&(0..r_s).collect::<Vec<_>>()).transpose();
    Ok(SubspaceBasis {
        vectors,
        source_rank: numerical_rank(&s.sigma, d, n),
        capture_ratio,
    })
}

/// Orthonormal basis of the orthogonal complement of `s` in ℝᵈ.
///
/// Computed as the range of `I − SᵀS` (the null space of `S`), followed by a
/// re-orthogonalization pass against `S`.
pub fn complement_basis(s: &SubspaceBasis, d: usize) -> Result<SubspaceBasis> {
    if s.dim() != d {
        return Err(Error::Shape(format!(
            "basis vectors have dimension {}, expected {d}",
            s.dim()
        )));
    }
    let r = s.rank();
    if r >= d {
        return Err(Error::Rank("complement is empty".into()));
    }
    let q = Matrix::identity(d).sub(&projector(s));
    let dec = svd(&q)?;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d - r);
    for k in 0..d - r {
        let mut v = dec.u.col(k);
        for i in 0..r {
            let c = dot(&v, s.vectors.row(i));
            for (x, b) in v.iter_mut().zip(s.vectors.row(i)) {
                *x -= c * b;
            }
        }
        for prev in &rows {
            let c = dot(&v, prev);
            for (x, b) in v.iter_mut().zip(prev.iter()) {
                *x -= c * b;
            }
        }
        super::matrix::normalize(&mut v);
        rows.push(v);
    }
    Ok(SubspaceBasis {
        vectors: Matrix::from_rows(&rows)?,
        source_rank: d - r,
        capture_ratio: 1.0,
    })
}

/// Orthogonal projector `VᵀV` onto the span of the basis.
pub fn projector(s: &SubspaceBasis) -> Matrix {
    s.vectors.transpose().matmul(&s.vectors)
}

/// Capture ratio of the rank-`r` truncation of `h`, for each requested `r`.
pub fn capture_ratio_sweep(h: &Matrix, ranks: &[usize]) -> Result<Vec<CapturePoint>> {
    if ranks.is_empty() {
        return Err(Error::Config("rank list is empty".into()));
    }
    let k = h.rows().min(h.cols());
    if let Some(bad) = ranks.iter().find(|r| **r == 0 || **r > k) {
        return Err(Error::Rank(format!("rank {bad} outside 1..={k}")));
    }
    let s = svd(h)?;
    let prefix = energy_prefix(&s.sigma);
    let total = *prefix.last().unwrap();
    Ok(ranks
        .iter()
        .map(|&rank| CapturePoint {
            rank,
            ratio: if total > 0.0 {
                prefix[rank - 1] / total
            } else {
                0.0
            },
        })
        .collect())
}
