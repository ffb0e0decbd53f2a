//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum MangoError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("partition layout error: {0}")]
    Layout(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric failure in block {block}: {detail}")]
    Numeric { block: usize, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("oracle failure at coordinate {coord}: {detail}")]
    Oracle { coord: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MangoError>;
