//! Experiment harness: dataset generation and loading, run configuration,
//! metric computation, and the loop that ties them together.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use config::{
    BaliMethodConfig, DatasetConfig, DatasetKind, DropoutMethodConfig, ExperimentConfig,
    GradientMethodConfig, GridConfig, MethodConfig, MethodName, ModelConfig, RunConfig,
};
pub use data::{
    gen_sinc, gen_sines_trend, gen_two_moons, load_csv, sinc_mean, sines_trend_mean, split_indices,
    CsvTable, Dataset, Standardizer, TaskKind,
};
pub use experiment::{
    evaluate_checkpoint, expected_targets, run_experiment, write_dataset_csv, Checkpoint,
    MetricsRecord, Model, ModelState, RunReport, ECE_BINS,
};
