//! Dense linear algebra: matrices, SVD, subspaces and projectors.
//!
//! Everything here computes in `f64`.

mod matrix;
mod subspace;
mod svd;

pub use matrix::{axpy, dot, norm, normalize, Matrix};
pub use subspace::{
    capture_ratio_sweep, complement_basis, principal_subspace, projector, CapturePoint,
    SubspaceBasis,
};
pub use svd::{svd, Svd};
