//! Multimodal attention-based normalizing flows.
//!
//! A normalizing-flow library built around an invertible cross-attention
//! layer: a coupling-style transform whose masked attention matrix is upper
//! triangular with positive diagonal, giving an exact inverse and an exact
//! log-determinant. Three reversible token partitioning schemes (MMCA, IMCA,
//! LICA) route attention across two modalities, and blocks of attention
//! layers plus an affine coupling stack into a flow with a standard-normal
//! prior. A PCA / autoencoder compression stage lets the flow model a
//! lower-dimensional feature space, and a joint likelihood + task objective
//! trains density and prediction together.
//!
//! Start with the runnable programs under `examples/` — each demonstrates
//! one capability end to end. The `mango` binary exposes the same
//! functionality as subcommands (`verify`, `gen-data`, `train`, `eval`,
//! `sample`, `compare`, `export-attention`).

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod oracle;
pub mod partition;
pub mod ica;
pub mod flow;
pub mod checkpoint;
pub mod opt;
pub mod compress;
pub mod data;
pub mod train;
pub mod config;
pub mod cli;

pub use error::{MangoError, Result};
pub use tensor::Tensor;
