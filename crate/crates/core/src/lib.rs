//! Domain-specific whitening layers and the min-entropy consensus loss for
//! unsupervised domain adaptation, on top of a small `f64` training stack.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`linalg`], [`gradcheck`], [`layer`]: dense arrays, Cholesky
//!   and triangular solves, finite differences, and the layer contract.
//! - [`whitening`]: grouped Cholesky whitening with per-domain statistics.
//! - [`losses`]: cross-entropy, entropy, L2 consistency and min-entropy consensus.
//! - [`model`]: dense/conv/pool/BN layers and the MLP and CNN builders.
//! - [`data`]: synthetic shifted domains, IDX files, perturbations, batch triples.
//! - [`train`]: optimizers, the three-batch step, mean teacher, the epoch loop.
//! - [`eval`]: metrics, checkpoints, run configuration and the commands behind the CLI.
//!
//! Data-parallel loops go through rayon when the `parallel` feature (on by
//! default) is enabled, and fall back to plain iteration otherwise. Results
//! are bitwise identical in both builds.

// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layer;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;
pub mod whitening;

pub use error::{Error, Result};
pub use layer::{DomainTag, Layer, LayerSpec, Mode, Parameter};
pub use tensor::Tensor;
