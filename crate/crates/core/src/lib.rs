//! Bayesian layerwise inference (BALI) for fully-connected networks.
//!
//! Each layer is treated as a multivariate Bayesian linear regression with a
//! conjugate matrix-normal inverse-Wishart posterior over (weights, output
//! noise covariance). Mini-batches update exponentially-moving-average
//! estimates of the likelihood natural parameters; pseudo-targets for hidden
//! layers come from normalized log-likelihood gradients at the layer outputs.
//! Every iteration refreshes the closed-form layer posteriors, extracts the
//! most-likely noise covariance, and resamples weights.
//!
//! Module map:
//! - [`tensor`]: dense row-major matrices, Cholesky with jitter escalation,
//!   SPD solves, Kronecker/vectorisation utilities, seeded Gaussian streams.
//! - [`conjugate`]: exact conjugate inference (Gaussian linear model,
//!   matrix-variate regression with known column scale, MNIW posterior, the
//!   inverse-Wishart mode, and matrix-normal sampling).
//! - [`network`]: the scaled-feature network convention, forward tracing,
//!   output-gradient backprop, and the three likelihood heads.
//! - [`bali`]: the training loop (EMA statistics with bias correction,
//!   pseudo-targets, posterior recomputation, three reparametrisation modes,
//!   posterior-predictive sampling, checkpointing).
//! - [`baselines`]: MAP training with decoupled-weight-decay Adam and
//!   Monte-Carlo dropout prediction.
//! - [`harness`]: datasets, metrics, experiment configs, and result files.
//! - [`checks`]: self-contained oracle suites shared by the CLI and the
//!   acceptance tests.

pub mod bali;
pub mod baselines;
pub mod checks;
pub mod conjugate;
pub mod error;
pub mod harness;
pub mod network;
pub mod tensor;

pub use bali::{BaliConfig, BaliModel, BaliModelState, BetaSchedule, EmaState, LayerPosterior, Prediction, Reparam};
pub use baselines::{AdamConfig, AdamState, DropoutMask, MapModel, MapModelState};
pub use conjugate::{GlmPosterior, InverseWishart, MatrixNormal, Mniw, MniwPosterior, MniwPrior};
pub use error::{Error, Result};
pub use harness::{Dataset, ExperimentConfig, MetricsRecord};
pub use network::{Activation, ForwardTrace, LayerSpec, LossHead, NetworkWeights, OutputGrads, Targets};
pub use tensor::{CholeskyFactor, Matrix, RngState, RngStream};

/// ChaCha stream ids, one per independent consumer of randomness. Keeping
/// them disjoint means adding draws to one consumer never shifts another,
/// so seeds stay comparable across configurations.
pub mod streams {
    /// Layer l trains on stream LAYER_BASE + l.
    pub const LAYER_BASE: u64 = 0;
    pub const SHUFFLE: u64 = 1000;
    pub const SPLIT: u64 = 1001;
    pub const DROPOUT: u64 = 1002;
    pub const BASELINE_INIT: u64 = 1003;
    pub const PREDICT: u64 = 2000;
    pub const DATA_GEN: u64 = 3000;
}
