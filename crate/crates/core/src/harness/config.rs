//! Experiment configuration: one TOML document drives dataset synthesis or
//! loading, the architecture, the training method, and the run schedule.
//! Unknown keys are hard errors so a typo cannot silently fall back to a
//! default hyperparameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bali::{BaliConfig, BetaSchedule, Reparam};
use crate::error::{Error, Result};
use crate::harness::data::TaskKind;
use crate::network::Activation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.method.validate()?;
        self.run.validate()?;
        let task = self.dataset.task();
        for metric in &self.run.metrics {
            let known: &[&str] = match task {
                TaskKind::Regression => &["rmse", "nll"],
                TaskKind::Classification => &["acc", "nll", "ece", "auc"],
            };
            if !known.contains(&metric.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "metric '{metric}' is not available for {task:?} (choose from {known:?})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SinesTrend,
    Sinc,
    TwoMoons,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Synthetic training size; each kind has its reference default.
    #[serde(default)]
    pub n: Option<usize>,
    /// Synthetic held-out size; defaults to the training size.
    #[serde(default)]
    pub n_test: Option<usize>,
    #[serde(default)]
    pub noise_std: Option<f64>,
    /// CSV source; forbidden for synthetic kinds.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// CSV target column names.
    #[serde(default)]
    pub targets: Vec<String>,
    /// CSV task; synthetic kinds imply theirs.
    #[serde(default)]
    pub task: Option<TaskKind>,
    /// CSV held-out share.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_true")]
    pub standardize_inputs: bool,
    /// Regression only; ignored for classification.
    #[serde(default = "default_true")]
    pub standardize_targets: bool,
}

impl DatasetConfig {
    pub fn train_n(&self) -> usize {
        self.n.unwrap_or(match self.kind {
            DatasetKind::SinesTrend => 32,
            DatasetKind::Sinc => 128,
            DatasetKind::TwoMoons => 128,
            DatasetKind::Csv => 0,
        })
    }

    pub fn test_n(&self) -> usize {
        self.n_test.unwrap_or_else(|| self.train_n())
    }

    pub fn noise(&self) -> f64 {
        self.noise_std.unwrap_or(match self.kind {
            DatasetKind::SinesTrend => 0.02,
            DatasetKind::Sinc => 0.1,
            DatasetKind::TwoMoons => 0.2,
            DatasetKind::Csv => 0.0,
        })
    }

    pub fn task(&self) -> TaskKind {
        match self.kind {
            DatasetKind::SinesTrend | DatasetKind::Sinc => TaskKind::Regression,
            DatasetKind::TwoMoons => TaskKind::Classification,
            DatasetKind::Csv => self.task.unwrap_or(TaskKind::Regression),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Csv => {
                if self.path.is_none() {
                    return Err(Error::InvalidConfig("csv datasets need a path".into()));
                }
                if self.targets.is_empty() {
                    return Err(Error::InvalidConfig("csv datasets need at least one target column".into()));
                }
                if self.task.is_none() {
                    return Err(Error::InvalidConfig("csv datasets need an explicit task".into()));
                }
                if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "test fraction must lie in (0, 1), got {}",
                        self.test_fraction
                    )));
                }
                if self.n.is_some() || self.n_test.is_some() || self.noise_std.is_some() {
                    return Err(Error::InvalidConfig(
                        "n, n_test, and noise_std describe synthetic data, not csv files".into(),
                    ));
                }
            }
            _ => {
                if self.path.is_some() || !self.targets.is_empty() {
                    return Err(Error::InvalidConfig("path and targets apply to csv datasets only".into()));
                }
                if let Some(task) = self.task {
                    if task != self.task() {
                        return Err(Error::InvalidConfig(format!(
                            "{:?} implies {:?}, not {task:?}",
                            self.kind,
                            self.task()
                        )));
                    }
                }
                if self.train_n() == 0 {
                    return Err(Error::InvalidConfig("synthetic datasets need n >= 1".into()));
                }
                if self.kind == DatasetKind::TwoMoons
                    && (self.train_n() % 2 != 0 || self.test_n() % 2 != 0)
                {
                    return Err(Error::InvalidConfig("two-moons sizes must be even".into()));
                }
                if self.noise() < 0.0 {
                    return Err(Error::InvalidConfig(format!("noise std must be non-negative, got {}", self.noise())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; empty means a single linear layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|w| *w == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Bali,
    Map,
    Dropout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: MethodName,
    /// Section for name = "bali"; omitted means all defaults.
    #[serde(default)]
    pub bali: Option<BaliMethodConfig>,
    #[serde(default)]
    pub map: Option<GradientMethodConfig>,
    #[serde(default)]
    pub dropout: Option<DropoutMethodConfig>,
}

impl MethodConfig {
    pub fn bali_settings(&self) -> BaliMethodConfig {
        self.bali.clone().unwrap_or_default()
    }

    pub fn map_settings(&self) -> GradientMethodConfig {
        self.map.clone().unwrap_or_default()
    }

    pub fn dropout_settings(&self) -> DropoutMethodConfig {
        self.dropout.clone().unwrap_or_default()
    }

    /// Iteration budget of whichever method is selected.
    pub fn iterations(&self) -> u64 {
        match self.name {
            MethodName::Bali => self.bali_settings().iterations,
            MethodName::Map => self.map_settings().iterations,
            MethodName::Dropout => self.dropout_settings().iterations,
        }
    }

    /// Batch size of whichever method is selected, defaulting to full batch.
    pub fn batch_size(&self, n_train: usize) -> usize {
        let requested = match self.name {
            MethodName::Bali => self.bali_settings().batch_size,
            MethodName::Map => self.map_settings().batch_size,
            MethodName::Dropout => self.dropout_settings().batch_size,
        };
        requested.unwrap_or(n_train).clamp(1, n_train.max(1))
    }

    fn validate(&self) -> Result<()> {
        let stray = match self.name {
            MethodName::Bali => self.map.is_some() || self.dropout.is_some(),
            MethodName::Map => self.bali.is_some() || self.dropout.is_some(),
            MethodName::Dropout => self.bali.is_some() || self.map.is_some(),
        };
        if stray {
            return Err(Error::InvalidConfig(format!(
                "method sections other than '{:?}' are present; keep exactly the selected method's section",
                self.name
            )));
        }
        if let Some(bali) = &self.bali {
            bali.validate()?;
        }
        if let Some(map) = &self.map {
            map.validate()?;
        }
        if let Some(dropout) = &self.dropout {
            dropout.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaliMethodConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Multiplies beta after each milestone; needs beta_milestones.
    #[serde(default)]
    pub beta_decay_factor: Option<f64>,
    /// Fractions of the iteration budget after which beta decays.
    #[serde(default)]
    pub beta_milestones: Vec<f64>,
    /// Effective dataset size; defaults to the training size.
    #[serde(default)]
    pub n_eff: Option<f64>,
    /// Defaults to full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_sigma_r_sq")]
    pub sigma_r_sq: f64,
    /// Defaults to 0.01 · n_eff.
    #[serde(default)]
    pub sigma_u_sq: Option<f64>,
    #[serde(default)]
    pub dof0: Option<f64>,
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
    #[serde(default = "default_reparam")]
    pub reparam: Reparam,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_pred_samples")]
    pub pred_samples: usize,
}

impl Default for BaliMethodConfig {
    fn default() -> Self {
        BaliMethodConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            beta_decay_factor: None,
            beta_milestones: Vec::new(),
            n_eff: None,
            batch_size: None,
            sigma_r_sq: default_sigma_r_sq(),
            sigma_u_sq: None,
            dof0: None,
            sigma_init: default_sigma_init(),
            reparam: default_reparam(),
            iterations: default_iterations(),
            pred_samples: default_pred_samples(),
        }
    }
}

impl BaliMethodConfig {
    fn validate(&self) -> Result<()> {
        if self.beta_decay_factor.is_some() != !self.beta_milestones.is_empty() {
            return Err(Error::InvalidConfig(
                "beta_decay_factor and beta_milestones come together or not at all".into(),
            ));
        }
        Ok(())
    }

    /// Materializes the trainer configuration for a concrete training size.
    pub fn to_bali_config(&self, n_train: usize) -> BaliConfig {
        let beta = match self.beta_decay_factor {
            Some(factor) if !self.beta_milestones.is_empty() => BetaSchedule::StepDecay {
                base: self.beta,
                factor,
                milestones: self.beta_milestones.clone(),
            },
            _ => BetaSchedule::constant(self.beta),
        };
        BaliConfig {
            alpha: self.alpha,
            beta,
            n_eff: self.n_eff.unwrap_or(n_train as f64),
            batch_size: self.batch_size.unwrap_or(n_train).clamp(1, n_train.max(1)),
            sigma_r_sq: self.sigma_r_sq,
            sigma_u_sq: self.sigma_u_sq,
            dof0: self.dof0,
            sigma_init: self.sigma_init,
            reparam: self.reparam,
            total_iters: self.iterations,
            pred_samples: self.pred_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientMethodConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
    /// Fixed Gaussian noise variance for regression likelihoods.
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
}

impl Default for GradientMethodConfig {
    fn default() -> Self {
        GradientMethodConfig {
            lr: default_lr(),
            weight_decay: 0.0,
            batch_size: None,
            iterations: default_iterations(),
            sigma_init: default_sigma_init(),
            noise_var: default_noise_var(),
        }
    }
}

impl GradientMethodConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::InvalidConfig(format!("noise variance must be positive, got {}", self.noise_var)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutMethodConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_sigma_init")]
    pub sigma_init: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    #[serde(default = "default_dropout_p")]
    pub p: f64,
    #[serde(default = "default_dropout_samples")]
    pub pred_samples: usize,
}

impl Default for DropoutMethodConfig {
    fn default() -> Self {
        DropoutMethodConfig {
            lr: default_lr(),
            weight_decay: 0.0,
            batch_size: None,
            iterations: default_iterations(),
            sigma_init: default_sigma_init(),
            noise_var: default_noise_var(),
            p: default_dropout_p(),
            pred_samples: default_dropout_samples(),
        }
    }
}

impl DropoutMethodConfig {
    fn validate(&self) -> Result<()> {
        self.gradient().validate()?;
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("dropout probability must lie in [0, 1), got {}", self.p)));
        }
        Ok(())
    }

    /// The optimizer subset shared with plain MAP training.
    pub fn gradient(&self) -> GradientMethodConfig {
        GradientMethodConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            iterations: self.iterations,
            sigma_init: self.sigma_init,
            noise_var: self.noise_var,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Iterations between evaluations; empty means once per 10 data passes.
    pub eval_every: Option<u64>,
    /// Posterior draws per evaluation.
    pub eval_samples: usize,
    /// Metric names; empty means the task's standard set.
    pub metrics: Vec<String>,
    pub out_dir: Option<PathBuf>,
    pub grid: Option<GridConfig>,
    pub save_checkpoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0],
            eval_every: None,
            eval_samples: 64,
            metrics: Vec::new(),
            out_dir: None,
            grid: None,
            save_checkpoint: false,
        }
    }
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidConfig("eval_samples must be at least 1".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
        }
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        Ok(())
    }
}

/// Evaluation lattice for prediction dumps: one axis for 1-D regression
/// inputs, the same range on both axes for 2-D classification inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridConfig {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.hi > self.lo) {
            return Err(Error::InvalidConfig(format!(
                "grid needs hi > lo and step > 0, got [{}, {}] step {}",
                self.lo, self.hi, self.step
            )));
        }
        Ok(())
    }

    /// Axis points lo, lo+step, …, through hi (inclusive up to rounding).
    pub fn axis(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step).round() as usize;
        (0..=count).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_alpha() -> f64 {
    0.3
}

fn default_beta() -> f64 {
    0.2
}

fn default_sigma_r_sq() -> f64 {
    40.0
}

fn default_sigma_init() -> f64 {
    1.0
}

fn default_reparam() -> Reparam {
    Reparam::Weight
}

fn default_iterations() -> u64 {
    1000
}

fn default_pred_samples() -> usize {
    256
}

fn default_lr() -> f64 {
    0.01
}

fn default_noise_var() -> f64 {
    0.01
}

fn default_dropout_p() -> f64 {
    0.1
}

fn default_dropout_samples() -> usize {
    128
}
