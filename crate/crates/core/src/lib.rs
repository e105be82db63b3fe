//! Graph convolutional networks whose layers mix node features over exact
//! k-hop neighborhoods with trainable per-hop coefficients, plus the
//! semi-supervised benchmark harness around them.
//!
//! * [`sparse`]: CSR and dense matrices and their kernels.
//! * [`graph`]: graphs and the exact-distance operator stack `Ā_0 … Ā_n`.
//! * [`model`]: forward and backward passes of the baseline and hop models.
//! * [`optim`]: Adam, L2 regularization and early stopping.
//! * [`data`]: dataset files, splits and random benchmark graphs.
//! * [`harness`]: repeated runs, accuracy grid, learning curves and timing.

pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sparse;

pub use error::{Error, Result};
pub use graph::{khop_stack, normalize_features, Graph, HopCache, HopStack};
pub use model::{ModelKind, ModelParams, Propagation};
pub use rng::Prng;
pub use sparse::{CsrMatrix, DenseMatrix};
