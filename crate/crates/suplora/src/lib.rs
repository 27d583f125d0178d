//! Supertype-preserving low-rank adapters for group-wise concept erasure,
//! on a small synthetic text-to-image world.
//!
//! A [`world::World`] maps concept ids to embeddings and target images. A
//! toy cross-attention [`denoiser`] is pretrained on it, erased concepts are
//! grouped under supertypes ([`hierarchy`]), one adapter pair per group is
//! trained to suppress them ([`erasure`]) while leaving the supertype
//! subspace untouched ([`adapter`]), and the adapters are merged into one
//! weight per layer in closed form ([`fusion`]).
//!
//! ```
//! use suplora::adapter::{delta, init_adapter};
//! use suplora::numerics::Matrix;
//!
//! let h_s = Matrix::from_fn(6, 4, |i, j| if i == j { (4 - j) as f64 } else { 0.0 });
//! let h_g = Matrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64).sin());
//! let mut ad = init_adapter(&h_s, &h_g, 2, 2, 3).unwrap();
//! ad.a = Matrix::from_fn(3, 2, |i, j| (i + j) as f64 + 1.0);
//! // A direction inside the supertype subspace passes through unchanged.
//! let h = [1.0, -2.0, 0.0, 0.0, 0.0, 0.0];
//! let d = delta(&ad).matvec(&h);
//! assert!(d.iter().all(|x| x.abs() < 1e-12));
//! ```

pub mod adapter;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod denoiser;
pub mod erasure;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod hierarchy;
pub mod numerics;
pub mod optim;
pub mod pgm;
pub mod pipeline;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
