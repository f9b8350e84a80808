//! Inference-time numerics for a reparameterized large-kernel crowd counter.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`tensor`]: a deterministic NCHW tensor engine with a reference and an
//!   im2col/GEMM convolution.
//! - [`reparam`]: batch-norm folding, kernel embedding and branch merging
//!   for multi-branch large-kernel blocks.
//! - [`backbone`]: a stem plus four large-kernel stages (overall stride 32).
//! - [`fusion`]: ASPP and context-aware fusion feeding a density head.
//! - [`density`]: Gaussian density ground truth from head annotations.
//! - [`loss`]: count error, entropic optimal transport and evaluation metrics.
//! - [`io`]: tensor files, weight bundles, annotation documents, PGM export.

pub mod backbone;
pub mod density;
pub mod error;
pub mod fusion;
pub mod io;
pub mod loss;
pub mod numeric;
pub mod params;
mod par;
pub mod reparam;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use par::set_worker_threads;
pub use rng::SplitMix64;
pub use tensor::{DType, Scalar, Tensor4};
