//! Sparse attention with low-dimensional key ranking.
//!
//! Keys are rotated into their principal basis once, offline. At decode time
//! the cache is scored using only the leading `d` principal coordinates, the
//! top `k` tokens are picked from those approximate scores, and exact
//! attention is computed over just that subset.
//!
//! Module map:
//! - [`tensor`]: row-major matrices, matmul, softmax and top-k selection.
//! - [`rope`]: rotary position embeddings (half-split pairing).
//! - [`calibration`]: covariance, Jacobi eigensolver, projections, rank metrics.
//! - [`attention`]: vanilla, Loki, exact top-k, PCA-only and H2O attention.
//! - [`kernels`]: slice/gather score and weighted-sum kernels without dense copies.
//! - [`metrics`]: Jaccard agreement, score error and the speedup model.
//! - [`bench`]: phase-level timing harness.
//! - [`data_io`]: LKD1/LKP1 binary formats and the synthetic key generator.
//!
//! With the default `parallel` feature, kernels and sweeps run on rayon.
//! Disabling it gives a purely sequential build with identical results.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod calibration;
pub mod data_io;
mod error;
pub mod kernels;
pub mod metrics;
mod parallel;
pub mod rope;
pub mod tensor;

pub use error::{FormatError, LokiError, Result};
pub use parallel::parallel_enabled;
