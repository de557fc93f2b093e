//! Crate-wide error type. Shape misuse inside tight numeric kernels panics;
//! everything the caller can plausibly hit at runtime is a variant here.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("matrix not symmetric: max asymmetry {max_asym:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("matrix of dim {dim} not positive definite even at jitter {jitter:.3e}")]
    NotPositiveDefinite { dim: usize, jitter: f64 },

    #[error("degrees of freedom {dof} invalid: must exceed {min}")]
    InvalidDof { dof: f64, min: f64 },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid label {label}: expected class index below {classes}")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("layer {layer} failed while updating {stat}: {source}")]
    LayerStep {
        layer: usize,
        stat: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}:{line}: {msg}")]
    CsvParse { path: String, line: u64, msg: String },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps a layerwise training failure with the layer index and the
    /// statistic being updated, per the step-abort diagnostics contract.
    pub fn in_layer(self, layer: usize, stat: &'static str) -> Error {
        Error::LayerStep { layer, stat, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
