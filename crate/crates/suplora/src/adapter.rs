//! Low-rank adapters `W + A·B` for the key and value projections.
//!
//! A SuPLoRA adapter freezes `B` on directions orthogonal to the supertype
//! subspace and trains only `A`, so its delta cannot act on supertype inputs
//! beyond the part of them that escapes the subspace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, principal_subspace, svd, Matrix, SubspaceBasis};
use crate::rng::{gaussian_vec, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Key,
    Value,
}

impl Layer {
    pub const BOTH: [Layer; 2] = [Layer::Key, Layer::Value];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Key => "key",
            Layer::Value => "value",
        }
    }
}

/// How `B` is chosen and whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `B` spans the top residual directions of the erased embeddings after
    /// projecting out the supertype subspace; frozen.
    Suplora,
    /// Plain LoRA: Gaussian `B`, trained together with `A`.
    VanillaLora,
    /// Random orthonormal `B`, frozen.
    FrozenRandomB,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Suplora,
        Variant::VanillaLora,
        Variant::FrozenRandomB,
    ];

    pub fn trains_b(self) -> bool {
        self == Variant::VanillaLora
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Suplora => "suplora",
            Variant::VanillaLora => "vanilla_lora",
            Variant::FrozenRandomB => "frozen_random_b",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceMeta {
    pub r_s: usize,
    pub capture_ratio: f64,
    pub supertype_id: String,
    /// `r_s × d_in` orthonormal basis of the supertype subspace.
    pub basis: Matrix,
}

impl SubspaceMeta {
    pub fn as_basis(&self) -> SubspaceBasis {
        SubspaceBasis {
            vectors: self.basis.clone(),
            source_rank: self.r_s,
            capture_ratio: self.capture_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuploraAdapter {
    pub group_id: usize,
    pub layer: Layer,
    pub variant: Variant,
    /// `d_out × r`, trainable.
    pub a: Matrix,
    /// `r × d_in`; frozen unless the variant trains it.
    pub b: Matrix,
    /// Present for SuPLoRA adapters.
    pub subspace: Option<SubspaceMeta>,
}

impl SuploraAdapter {
    pub fn rank(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.b.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    /// Same adapter re-targeted at another layer, with `A` reset to zero.
    pub fn for_layer(&self, layer: Layer) -> Self {
        Self {
            layer,
            a: Matrix::zeros(self.d_out(), self.rank()),
            ..self.clone()
        }
    }

    /// Largest deviation of `B·Bᵀ` from the identity.
    pub fn b_orthonormality_error(&self) -> f64 {
        self.b
            .matmul(&self.b.transpose())
            .sub(&Matrix::identity(self.rank()))
            .max_abs()
    }

    /// Largest entry of `B·Q_Sᵀ`, or `None` without a stored subspace.
    pub fn b_subspace_leak(&self) -> Option<f64> {
        self.subspace
            .as_ref()
            .map(|m| self.b.matmul(&m.basis.transpose()).max_abs())
    }

    /// `(‖A·B·h‖, ‖A‖₂·‖(I − P_S)·h‖)`: the two sides of the supertype
    /// preservation bound. `None` without a stored subspace.
    pub fn preservation_bound(&self, h: &[f64]) -> Option<(f64, f64)> {
        let meta = self.subspace.as_ref()?;
        let lhs = norm(&self.a.matvec(&self.b.matvec(h)));
        let rhs = self.a.spectral_norm() * norm(&meta.as_basis().residual(h));
        Some((lhs, rhs))
    }
}

/// Builds a SuPLoRA adapter with `A = 0`.
///
/// `S` is the `r_s`-dimensional principal subspace of `h_s`; `B` holds the
/// top `r` left singular vectors of `(I − P_S)·h_g` as rows. The adapter
/// comes back for group 0, key layer, with an empty supertype id.
pub fn init_adapter(
    h_s: &Matrix,
    h_g: &Matrix,
    r_s: usize,
    r: usize,
    d_out: usize,
) -> Result<SuploraAdapter> {
    let d = h_s.rows();
    if h_g.rows() != d {
        return Err(Error::Shape(format!(
            "supertype samples have dimension {d}, group samples {}",
            h_g.rows()
        )));
    }
    if r == 0 || r_s + r > d {
        return Err(Error::Rank(format!(
            "r_s + r = {} exceeds d_in = {d}",
            r_s + r
        )));
    }
    let s = principal_subspace(h_s, r_s)?;
    let p = crate::numerics::projector(&s);
    let residual = h_g.sub(&p.matmul(h_g));
    let scale = h_g.frobenius().max(f64::MIN_POSITIVE);
    let dec = svd(&residual)?;
    let live = dec.sigma.iter().filter(|x| **x > 1e-10 * scale).count();
    if live < r {
        return Err(Error::Rank(format!(
            "erased embeddings leave only {live} directions outside the supertype subspace; \
             choose r <= {live}"
        )));
    }
    // Project once more so B is orthogonal to S to working precision.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let u = dec.u.col(k);
        let mut v = s.residual(&u);
        for prev in &rows {
            let c = crate::numerics::dot(&v, prev);
            crate::numerics::axpy(&mut v, -c, prev);
        }
        crate::numerics::normalize(&mut v);
        rows.push(v);
    }
    Ok(SuploraAdapter {
        group_id: 0,
        layer: Layer::Key,
        variant: Variant::Suplora,
        a: Matrix::zeros(d_out, r),
        b: Matrix::from_rows(&rows)?,
        subspace: Some(SubspaceMeta {
            r_s,
            capture_ratio: s.capture_ratio,
            supertype_id: String::new(),
            basis: s.vectors,
        }),
    })
}

/// Baseline adapters for the ablation: Gaussian `B` with entries of variance
/// `1/d_in` (trained) or a random orthonormal `B` (frozen).
pub fn init_baseline(
    variant: Variant,
    d_in: usize,
    d_out: usize,
    r: usize,
    seed: u64,
    label: &str,
) -> Result<SuploraAdapter> {
    let mut rng = stream(seed, &format!("adapter/{}/{label}", variant.name()));
    let b = match variant {
        Variant::Suplora => {
            return Err(Error::Config(
                "SuPLoRA adapters need supertype samples".into(),
            ));
        }
        Variant::VanillaLora => {
            let scale = 1.0 / (d_in as f64).sqrt();
            Matrix::from_vec(
                r,
                d_in,
                gaussian_vec(&mut rng, r * d_in)
                    .iter()
                    .map(|x| x * scale)
                    .collect(),
            )?
        }
        Variant::FrozenRandomB => {
            let g = Matrix::from_vec(d_in, r, gaussian_vec(&mut rng, r * d_in))?;
            let dec = svd(&g)?;
            // Orthonormal rows spanning the same space as the Gaussian draw.
            dec.u.matmul(&dec.v.transpose()).transpose()
        }
    };
    Ok(SuploraAdapter {
        group_id: 0,
        layer: Layer::Key,
        variant,
        a: Matrix::zeros(d_out, r),
        b,
        subspace: None,
    })
}

/// `A·B`
pub fn delta(adapter: &SuploraAdapter) -> Matrix {
    adapter.a.matmul(&adapter.b)
}

/// `W + A·B`; `w` is left untouched.
pub fn merge_into(w: &Matrix, adapter: &SuploraAdapter) -> Result<Matrix> {
    if w.shape() != (adapter.d_out(), adapter.d_in()) {
        return Err(Error::Shape(format!(
            "weight is {:?}, adapter delta is {}x{}",
            w.shape(),
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    Ok(w.add(&delta(adapter)))
}

/// Both sides of the update identity for one plain gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    /// Change of `W + A·B` when `A` takes the step: `(−α·g·hᵀ·Bᵀ)·B`.
    pub lhs: Matrix,
    /// The full-weight step projected onto the adapter's row space:
    /// `(−α·g·hᵀ)·BᵀB`.
    pub rhs: Matrix,
    pub rel_err: f64,
}

/// Evaluates the step `ΔA = −α·(∂L/∂o)·hᵀ·Bᵀ` and compares the resulting
/// weight change with the projected full-weight step.
pub fn check_projection_identity(
    w: &Matrix,
    adapter: &SuploraAdapter,
    h: &[f64],
    g: &[f64],
    alpha: f64,
) -> Result<IdentityReport> {
    let (d_out, d_in) = (adapter.d_out(), adapter.d_in());
    if w.shape() != (d_out, d_in) || h.len() != d_in || g.len() != d_out {
        return Err(Error::Shape(format!(
            "W {:?}, h {}, g {} against adapter {d_out}x{d_in}",
            w.shape(),
            h.len(),
            g.len()
        )));
    }
    let bh = adapter.b.matvec(h);
    let mut step_a = Matrix::zeros(d_out, adapter.rank());
    step_a.add_outer(-alpha, g, &bh);
    let lhs = step_a.matmul(&adapter.b);

    let mut step_w = Matrix::zeros(d_out, d_in);
    step_w.add_outer(-alpha, g, h);
    let rhs = step_w.matmul(&adapter.b.transpose().matmul(&adapter.b));

    let rel_err = lhs.sub(&rhs).frobenius() / rhs.frobenius().max(1e-30);
    Ok(IdentityReport { lhs, rhs, rel_err })
}
