//! Layer-wise Bayesian training.
//!
//! Each layer is treated as a multivariate Bayesian linear regression from
//! its scaled augmented input to a per-layer target matrix, carrying a
//! matrix-normal inverse-Wishart posterior. A training step runs one
//! forward/backward pass, turns the back-propagated log-likelihood
//! gradients into pseudo-targets via a normalized gradient step, folds the
//! mini-batch second moments into debiased exponential moving averages of
//! the likelihood's natural parameters, and refreshes every layer posterior
//! in closed form. Sampling weights from the refreshed posteriors closes
//! the loop.
//!
//! Three stochastic estimators are supported: sampling weight matrices
//! (default), sampling pre-activations per example from the induced
//! predictive (local), and propagating posterior means only
//! (deterministic).

use serde::{Deserialize, Serialize};

use crate::conjugate::{iw_mode, mniw_posterior_from_stats, Mniw, MniwPriorTerms, MniwUpdate};
use crate::error::{Error, Result};
use crate::network::{
    backward_output_grads, forward, head_grads, scaled_augment, softmax_rows, ForwardTrace,
    LayerSpec, LossHead, NetworkWeights, Targets,
};
use crate::streams;
use crate::tensor::{sample_gaussian, CholeskyFactor, Matrix, RngState, RngStream};

/// Floor on the debiased squared-gradient scale inside pseudo-target
/// normalization, so exactly dead units cannot divide by zero.
const MIN_GRAD_VAR: f64 = 1e-12;

/// Mini-batch weight per step. The decayed value applies from the step
/// after the given fraction of the total budget has elapsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Constant { value: f64 },
    StepDecay { base: f64, factor: f64, milestones: Vec<f64> },
}

impl BetaSchedule {
    pub fn constant(value: f64) -> Self {
        BetaSchedule::Constant { value }
    }

    /// Value for the 1-based iteration index out of `total`.
    pub fn value(&self, iteration: u64, total: u64) -> f64 {
        match self {
            BetaSchedule::Constant { value } => *value,
            BetaSchedule::StepDecay { base, factor, milestones } => {
                let progress = iteration.saturating_sub(1) as f64 / total.max(1) as f64;
                let hits = milestones.iter().filter(|m| progress >= **m).count();
                base * factor.powi(hits as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_weight = |v: f64| v > 0.0 && v <= 1.0;
        match self {
            BetaSchedule::Constant { value } => {
                if !ok_weight(*value) {
                    return Err(Error::InvalidConfig(format!("beta must lie in (0, 1], got {value}")));
                }
            }
            BetaSchedule::StepDecay { base, factor, milestones } => {
                if !ok_weight(*base) {
                    return Err(Error::InvalidConfig(format!("beta base must lie in (0, 1], got {base}")));
                }
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(Error::InvalidConfig(format!("beta decay factor must lie in (0, 1], got {factor}")));
                }
                if milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
                    return Err(Error::InvalidConfig("beta milestones must be fractions in [0, 1]".into()));
                }
            }
        }
        Ok(())
    }
}

/// How stochasticity enters the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reparam {
    Weight,
    Local,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaliConfig {
    /// Pseudo-target step size.
    pub alpha: f64,
    pub beta: BetaSchedule,
    /// Effective dataset size multiplying the per-batch moments.
    pub n_eff: f64,
    pub batch_size: usize,
    /// Prior row scale: R₀ = sigma_r_sq·I.
    pub sigma_r_sq: f64,
    /// Prior noise scale: U₀ = sigma_u_sq·I; defaults to 0.01·n_eff.
    pub sigma_u_sq: Option<f64>,
    /// Prior degrees of freedom; defaults per layer to out_dim + 2.
    pub dof0: Option<f64>,
    /// Standard deviation of the entries of the initial weight sample.
    pub sigma_init: f64,
    pub reparam: Reparam,
    pub total_iters: u64,
    /// Weight draws per prediction.
    pub pred_samples: usize,
}

impl BaliConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive and finite, got {}", self.alpha)));
        }
        self.beta.validate()?;
        if !(self.n_eff > 0.0 && self.n_eff.is_finite()) {
            return Err(Error::InvalidConfig(format!("n_eff must be positive and finite, got {}", self.n_eff)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.sigma_r_sq > 0.0 && self.sigma_r_sq.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_r_sq must be positive, got {}", self.sigma_r_sq)));
        }
        if let Some(v) = self.sigma_u_sq {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("sigma_u_sq must be positive, got {v}")));
            }
        }
        if !(self.sigma_init >= 0.0 && self.sigma_init.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_init must be non-negative, got {}", self.sigma_init)));
        }
        if self.pred_samples == 0 {
            return Err(Error::InvalidConfig("pred_samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn noise_scale_sq(&self) -> f64 {
        self.sigma_u_sq.unwrap_or(0.01 * self.n_eff)
    }

    pub fn layer_dof0(&self, out_dim: usize) -> f64 {
        self.dof0.unwrap_or((out_dim + 2) as f64)
    }
}

/// Debiased exponential moving averages of one layer's likelihood
/// statistics: input/cross/target second moments scaled to full-dataset
/// size and the per-unit mean squared back-propagated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    sxx: Matrix,
    sxy: Matrix,
    syy: Matrix,
    sgg: Vec<f64>,
    t: u64,
    /// Running product of (1 − β_s); the debias factor is its complement.
    complement: f64,
}

impl EmaState {
    pub fn new(in_dim_aug: usize, out_dim: usize) -> Self {
        EmaState {
            sxx: Matrix::zeros(in_dim_aug, in_dim_aug),
            sxy: Matrix::zeros(in_dim_aug, out_dim),
            syy: Matrix::zeros(out_dim, out_dim),
            sgg: vec![0.0; out_dim],
            t: 0,
            complement: 1.0,
        }
    }

    /// Starts a new step: advances the counter and the debias product.
    pub fn advance(&mut self, beta: f64) {
        self.t += 1;
        self.complement *= 1.0 - beta;
    }

    pub fn update_grads(&mut self, beta: f64, grad_sq_mean: &[f64]) {
        assert_eq!(grad_sq_mean.len(), self.sgg.len(), "gradient moment width mismatch");
        for (s, g) in self.sgg.iter_mut().zip(grad_sq_mean) {
            *s = (1.0 - beta) * *s + beta * g;
        }
    }

    /// Folds a batch into the moment averages with full-dataset scaling:
    /// each moment moves toward n_over_b times the batch statistic.
    pub fn update_moments(&mut self, beta: f64, x: &Matrix, y: &Matrix, n_over_b: f64) -> Result<()> {
        if x.cols() != self.sxx.rows() || y.cols() != self.syy.rows() || x.rows() != y.rows() {
            return Err(Error::Shape {
                context: "EmaState::update_moments",
                detail: format!(
                    "x {}x{}, y {}x{}, state {}x{}",
                    x.rows(),
                    x.cols(),
                    y.rows(),
                    y.cols(),
                    self.sxx.rows(),
                    self.syy.rows()
                ),
            });
        }
        let decay = 1.0 - beta;
        let w = beta * n_over_b;
        self.sxx.ema_in_place(decay, &x.tr_matmul(x), w);
        self.sxy.ema_in_place(decay, &x.tr_matmul(y), w);
        self.syy.ema_in_place(decay, &y.tr_matmul(y), w);
        Ok(())
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Debias factor b = 1 − Π(1 − β_s); zero until the first step.
    pub fn bias_correction(&self) -> f64 {
        1.0 - self.complement
    }

    pub fn input_moment(&self) -> &Matrix {
        &self.sxx
    }

    pub fn cross_moment(&self) -> &Matrix {
        &self.sxy
    }

    pub fn target_moment(&self) -> &Matrix {
        &self.syy
    }

    pub fn grad_sq(&self) -> &[f64] {
        &self.sgg
    }
}

/// Targets for one layer: a normalized gradient ascent step away from the
/// pre-activations, y = z + α·g/√(max(sgg/b, floor)).
pub fn pseudo_targets(z: &Matrix, g: &Matrix, grad_sq: &[f64], bias_correction: f64, alpha: f64) -> Matrix {
    assert!(
        z.rows() == g.rows() && z.cols() == g.cols() && grad_sq.len() == z.cols(),
        "pseudo_targets shape mismatch: z {}x{}, g {}x{}, {} gradient scales",
        z.rows(),
        z.cols(),
        g.rows(),
        g.cols(),
        grad_sq.len()
    );
    assert!(bias_correction > 0.0, "pseudo_targets needs at least one absorbed step");
    let step: Vec<f64> = grad_sq
        .iter()
        .map(|s| alpha / (s / bias_correction).max(MIN_GRAD_VAR).sqrt())
        .collect();
    let mut y = z.clone();
    for i in 0..y.rows() {
        let grow = g.row(i);
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            *v += step[j] * grow[j];
        }
    }
    y
}

/// One layer's full statistics update for a step: advances the averages,
/// absorbs the squared gradients, forms the targets (the provided true
/// targets, when given, otherwise pseudo-targets), and folds the moments.
/// Returns the targets that were used.
pub fn ema_update(
    ema: &mut EmaState,
    beta: f64,
    x: &Matrix,
    z: &Matrix,
    g: &Matrix,
    alpha: f64,
    n_over_b: f64,
    true_targets: Option<&Matrix>,
) -> Result<Matrix> {
    ema.advance(beta);
    ema.update_grads(beta, &column_mean_sq(g));
    let y = match true_targets {
        Some(t) => t.clone(),
        None => pseudo_targets(z, g, ema.grad_sq(), ema.bias_correction(), alpha),
    };
    ema.update_moments(beta, x, &y, n_over_b)?;
    Ok(y)
}

fn column_mean_sq(g: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v * v;
        }
    }
    let b = g.rows().max(1) as f64;
    for o in &mut out {
        *o /= b;
    }
    out
}

/// Refreshes the closed-form posterior from the debiased averages: the
/// statistics enter the conjugate update divided by the debias factor.
pub fn recompute_posterior(prior: &MniwPriorTerms, ema: &EmaState, n_eff: f64) -> Result<MniwUpdate> {
    let b = ema.bias_correction();
    if !(b > 0.0) {
        return Err(Error::InvalidConfig("posterior refresh before any update was absorbed".into()));
    }
    let inv_b = 1.0 / b;
    mniw_posterior_from_stats(
        prior,
        &ema.input_moment().scale(inv_b),
        &ema.cross_moment().scale(inv_b),
        &ema.target_moment().scale(inv_b),
        n_eff,
    )
}

/// One layer's posterior with the derived quantities every step needs: the
/// noise mode Σ = U/(u+Dy+1), a factor of Σ, and a factor of the posterior
/// row precision for sampling and per-example variances.
#[derive(Clone, Debug)]
pub struct LayerPosterior {
    params: Mniw,
    noise_mode: Matrix,
    prec_chol: CholeskyFactor,
    noise_chol: CholeskyFactor,
}

impl LayerPosterior {
    pub fn from_update(update: MniwUpdate) -> Self {
        let dy = update.posterior.out_dim() as f64;
        let denom = update.posterior.dof() + dy + 1.0;
        let noise_mode = iw_mode(&update.posterior.noise());
        let noise_chol = update.u_chol.scaled(1.0 / denom.sqrt());
        LayerPosterior {
            params: update.posterior,
            noise_mode,
            prec_chol: update.prec_chol,
            noise_chol,
        }
    }

    pub fn params(&self) -> &Mniw {
        &self.params
    }

    pub fn noise_mode(&self) -> &Matrix {
        &self.noise_mode
    }

    pub fn noise_chol(&self) -> &CholeskyFactor {
        &self.noise_chol
    }

    pub fn prec_chol(&self) -> &CholeskyFactor {
        &self.prec_chol
    }
}

/// Draws W = M + L⁻ᵀ·A·L_Σᵀ where L is the factor of the row precision
/// (so L⁻ᵀL⁻¹ = R) and A is standard normal.
pub fn sample_layer_weights(posterior: &LayerPosterior, rng: &mut RngStream) -> Matrix {
    let m = posterior.params.mean();
    let a = sample_gaussian(rng, m.rows(), m.cols());
    let row_part = posterior.prec_chol.half_solve_tr_mat(&a);
    m.add(&posterior.noise_chol.mul_tr_right(&row_part))
}

/// A per-layer batch as absorbed during one step, kept when recording is
/// enabled so update identities can be replayed against the model.
#[derive(Clone, Debug)]
pub struct RecordedStep {
    pub x: Matrix,
    pub y: Matrix,
    pub beta: f64,
    pub n_over_b: f64,
}

/// Replays a recorded single-layer history through two algebraically equal
/// routes in the undebiased parametrization and returns the largest mean
/// discrepancy: the direct refresh M̃_t = (R₀⁻¹+Ψxx)⁻¹(R₀⁻¹M₀+Ψxy) against
/// the incremental form
/// M̃_t = M̃_{t−1} + β_t·R̃_t(R₀⁻¹(M₀−M̃_{t−1}) + (N/B)·X_tᵀ(Y_t−X_tM̃_{t−1})).
pub fn mean_recursion_check(mean0: &Matrix, row_prec0: &Matrix, steps: &[RecordedStep]) -> Result<f64> {
    let dx = mean0.rows();
    let dy = mean0.cols();
    if row_prec0.rows() != dx || row_prec0.cols() != dx {
        return Err(Error::Shape {
            context: "mean_recursion_check",
            detail: format!("mean {}x{}, row precision {}x{}", dx, dy, row_prec0.rows(), row_prec0.cols()),
        });
    }
    let prior_mean_term = row_prec0.matmul(mean0);
    let mut sxx = Matrix::zeros(dx, dx);
    let mut sxy = Matrix::zeros(dx, dy);
    let mut mean_rec = mean0.clone();
    let mut max_dev = 0.0_f64;
    for step in steps {
        sxx.ema_in_place(1.0 - step.beta, &step.x.tr_matmul(&step.x), step.beta * step.n_over_b);
        sxy.ema_in_place(1.0 - step.beta, &step.x.tr_matmul(&step.y), step.beta * step.n_over_b);
        let prec = row_prec0.add(&sxx).symmetrized();
        let chol = crate::tensor::cholesky(&prec, 0.0)?;
        let mean_direct = chol.solve_mat(&prior_mean_term.add(&sxy));

        let residual = step.y.sub(&step.x.matmul(&mean_rec));
        let inner = row_prec0
            .matmul(&mean0.sub(&mean_rec))
            .add(&step.x.tr_matmul(&residual).scale(step.n_over_b));
        mean_rec = mean_rec.add(&chol.solve_mat(&inner).scale(step.beta));
        max_dev = max_dev.max(mean_direct.max_abs_diff(&mean_rec));
    }
    Ok(max_dev)
}

/// What a training step reports back.
#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    /// Batch log-likelihood at the pre-update parameters.
    pub log_prob: f64,
    pub beta: f64,
    pub bias_correction: f64,
}

/// Model predictions. Regression keeps the raw output samples so callers
/// can form mixture likelihoods; classification reports the averaged class
/// probabilities with their spread and the entropy of the average.
#[derive(Clone, Debug)]
pub enum Prediction {
    Regression {
        mean: Matrix,
        /// Predictive standard deviation per output: sample spread plus the
        /// noise mode diagonal.
        std: Matrix,
        samples: Vec<Matrix>,
        noise: Matrix,
    },
    Classification {
        probs: Matrix,
        entropy: Vec<f64>,
        prob_std: Matrix,
    },
}

#[derive(Clone, Debug)]
struct LayerState {
    prior: Mniw,
    prior_terms: MniwPriorTerms,
    posterior: LayerPosterior,
    ema: EmaState,
    rng: RngStream,
}

/// Serializable snapshot of a model. Everything derived (posteriors,
/// factors, posterior means) is rebuilt from the averages on load by the
/// same deterministic code path that produced it, so a restored model
/// continues bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaliModelState {
    pub specs: Vec<LayerSpec>,
    pub head: LossHead,
    pub config: BaliConfig,
    pub seed: u64,
    pub t: u64,
    pub emas: Vec<EmaState>,
    pub weights: Vec<Matrix>,
    pub rng_states: Vec<RngState>,
}

#[derive(Clone, Debug)]
pub struct BaliModel {
    specs: Vec<LayerSpec>,
    head: LossHead,
    config: BaliConfig,
    seed: u64,
    t: u64,
    layers: Vec<LayerState>,
    weights: NetworkWeights,
    means: NetworkWeights,
    history: Option<Vec<Vec<RecordedStep>>>,
}

fn validate_specs(specs: &[LayerSpec], head: LossHead) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("a model needs at least one layer".into()));
    }
    for l in 0..specs.len() - 1 {
        if specs[l].out_dim != specs[l + 1].in_dim {
            return Err(Error::Shape {
                context: "validate_specs",
                detail: format!("layer {l} emits {} but layer {} expects {}", specs[l].out_dim, l + 1, specs[l + 1].in_dim),
            });
        }
    }
    let out = specs.last().expect("nonempty").out_dim;
    if head == LossHead::SigmoidBce && out != 1 {
        return Err(Error::InvalidConfig(format!("the Bernoulli head needs one output logit, got {out}")));
    }
    if out == 0 {
        return Err(Error::InvalidConfig("output width must be at least 1".into()));
    }
    Ok(())
}

fn initial_posterior(terms: &MniwPriorTerms, dx: usize, dy: usize) -> Result<LayerPosterior> {
    let update = mniw_posterior_from_stats(
        terms,
        &Matrix::zeros(dx, dx),
        &Matrix::zeros(dx, dy),
        &Matrix::zeros(dy, dy),
        0.0,
    )?;
    Ok(LayerPosterior::from_update(update))
}

/// Builds a model with per-layer isotropic priors, per-layer random
/// streams, and an initial weight sample with independent N(0, σ_init²)
/// entries.
pub fn init_model(specs: &[LayerSpec], head: LossHead, config: BaliConfig, seed: u64) -> Result<BaliModel> {
    config.validate()?;
    validate_specs(specs, head)?;
    let sigma_u_sq = config.noise_scale_sq();
    let mut layers = Vec::with_capacity(specs.len());
    let mut weight_mats = Vec::with_capacity(specs.len());
    let mut mean_mats = Vec::with_capacity(specs.len());
    for (l, spec) in specs.iter().enumerate() {
        let dx = spec.weight_rows();
        let dy = spec.out_dim;
        let prior = Mniw::isotropic_prior(dx, dy, config.sigma_r_sq, sigma_u_sq, config.layer_dof0(dy))?;
        let prior_terms = MniwPriorTerms::from_prior(&prior)?;
        let posterior = initial_posterior(&prior_terms, dx, dy).map_err(|e| e.in_layer(l, "prior"))?;
        let mut rng = RngStream::new(seed, streams::LAYER_BASE + l as u64);
        weight_mats.push(sample_gaussian(&mut rng, dx, dy).scale(config.sigma_init));
        mean_mats.push(posterior.params().mean().clone());
        layers.push(LayerState { prior, prior_terms, posterior, ema: EmaState::new(dx, dy), rng });
    }
    let weights = NetworkWeights::new(specs, weight_mats)?;
    let means = NetworkWeights::new(specs, mean_mats)?;
    Ok(BaliModel {
        specs: specs.to_vec(),
        head,
        config,
        seed,
        t: 0,
        layers,
        weights,
        means,
        history: None,
    })
}

impl BaliModel {
    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn config(&self) -> &BaliConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn means(&self) -> &NetworkWeights {
        &self.means
    }

    pub fn layer_prior(&self, l: usize) -> &Mniw {
        &self.layers[l].prior
    }

    pub fn layer_posterior(&self, l: usize) -> &LayerPosterior {
        &self.layers[l].posterior
    }

    pub fn layer_ema(&self, l: usize) -> &EmaState {
        &self.layers[l].ema
    }

    /// Starts keeping the per-layer (input, target) batches of every
    /// subsequent step.
    pub fn enable_recording(&mut self) {
        self.history = Some(vec![Vec::new(); self.specs.len()]);
    }

    /// Returns the recorded history (outer index: layer) and stops
    /// recording.
    pub fn take_history(&mut self) -> Vec<Vec<RecordedStep>> {
        self.history.take().unwrap_or_default()
    }

    /// One full training step on a batch. Returns the batch log-likelihood
    /// under the pre-update parameters.
    pub fn train_step(&mut self, x: &Matrix, targets: &Targets) -> Result<StepOutcome> {
        let batch = x.rows();
        if batch == 0 {
            return Err(Error::EmptyDataset("train_step received an empty batch".into()));
        }
        if targets.len() != batch {
            return Err(Error::Shape {
                context: "train_step",
                detail: format!("{} inputs vs {} targets", batch, targets.len()),
            });
        }
        let t_next = self.t + 1;
        let beta = self.config.beta.value(t_next, self.config.total_iters);
        let n_over_b = self.config.n_eff / batch as f64;
        let alpha = self.config.alpha;
        let depth = self.specs.len();

        let trace = match self.config.reparam {
            Reparam::Weight => forward(&self.specs, &self.weights, x)?,
            Reparam::Deterministic => forward(&self.specs, &self.means, x)?,
            Reparam::Local => self.forward_local(x)?,
        };
        let sigma_chol = match self.head {
            LossHead::Gaussian => Some(self.layers[depth - 1].posterior.noise_chol()),
            _ => None,
        };
        let head_out = head_grads(self.head, trace.output(), targets, sigma_chol)?;
        let backprop_weights = match self.config.reparam {
            Reparam::Weight => &self.weights,
            Reparam::Local | Reparam::Deterministic => &self.means,
        };
        let grads = backward_output_grads(&self.specs, backprop_weights, &trace, &head_out.grad)?;

        let true_last = match (self.head, targets) {
            (LossHead::Gaussian, Targets::Values(y)) => Some(y),
            _ => None,
        };

        for l in 0..depth {
            let layer = &mut self.layers[l];
            let targets_l = if l + 1 == depth { true_last } else { None };
            let y_l = ema_update(
                &mut layer.ema,
                beta,
                &trace.inputs[l],
                &trace.preacts[l],
                &grads[l],
                alpha,
                n_over_b,
                targets_l,
            )
            .map_err(|e| e.in_layer(l, "moments"))?;
            if let Some(history) = &mut self.history {
                history[l].push(RecordedStep { x: trace.inputs[l].clone(), y: y_l, beta, n_over_b });
            }
            let update = recompute_posterior(&layer.prior_terms, &layer.ema, self.config.n_eff)
                .map_err(|e| e.in_layer(l, "posterior"))?;
            layer.posterior = LayerPosterior::from_update(update);
            *self.means.layer_mut(l) = layer.posterior.params().mean().clone();
            if self.config.reparam == Reparam::Weight {
                *self.weights.layer_mut(l) = sample_layer_weights(&layer.posterior, &mut layer.rng);
            }
        }
        self.t = t_next;
        Ok(StepOutcome {
            log_prob: head_out.log_prob,
            beta,
            bias_correction: self.layers[0].ema.bias_correction(),
        })
    }

    /// Forward pass sampling each layer's pre-activations per example:
    /// zₙ ~ N(Mᵀxₙ, (xₙᵀRxₙ)·Σ), correlations across examples ignored.
    fn forward_local(&mut self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.specs[0].in_dim {
            return Err(Error::Shape {
                context: "forward_local",
                detail: format!("input width {} but first layer wants {}", x.cols(), self.specs[0].in_dim),
            });
        }
        let depth = self.specs.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut preacts = Vec::with_capacity(depth);
        let mut layer_in = scaled_augment(x);
        for l in 0..depth {
            let mean_z = layer_in.matmul(self.means.layer(l));
            let layer = &mut self.layers[l];
            // Row scales: ||L⁻¹xₙ||² with L the row-precision factor.
            let half = layer.posterior.prec_chol().half_solve_mat(&layer_in.transpose());
            let eps = sample_gaussian(&mut layer.rng, mean_z.rows(), mean_z.cols());
            let mut noise = layer.posterior.noise_chol().mul_tr_right(&eps);
            for n in 0..noise.rows() {
                let mut quad = 0.0;
                for i in 0..half.rows() {
                    let v = half.get(i, n);
                    quad += v * v;
                }
                let s = quad.sqrt();
                for v in noise.row_mut(n) {
                    *v *= s;
                }
            }
            let z = mean_z.add(&noise);
            inputs.push(layer_in);
            if l + 1 < depth {
                let act = self.specs[l].activation;
                let h = z.map(|v| act.apply(v));
                layer_in = scaled_augment(&h);
            } else {
                layer_in = Matrix::zeros(0, 0);
            }
            preacts.push(z);
        }
        Ok(ForwardTrace { inputs, preacts })
    }

    /// Posterior predictive on a batch. With n_samples ≤ 1 the posterior
    /// means propagate deterministically; otherwise n_samples full weight
    /// sets are drawn from a dedicated stream at a fixed position, so
    /// repeated calls see identical draws and never disturb training.
    pub fn predict(&self, x: &Matrix, n_samples: usize) -> Result<Prediction> {
        let outputs = if n_samples <= 1 {
            vec![forward(&self.specs, &self.means, x)?.output().clone()]
        } else {
            let mut rng = RngStream::new(self.seed, streams::PREDICT);
            let mut outputs = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let mats = self
                    .layers
                    .iter()
                    .map(|ls| sample_layer_weights(&ls.posterior, &mut rng))
                    .collect();
                let w = NetworkWeights::new(&self.specs, mats)?;
                outputs.push(forward(&self.specs, &w, x)?.output().clone());
            }
            outputs
        };
        self.summarize(outputs)
    }

    fn summarize(&self, outputs: Vec<Matrix>) -> Result<Prediction> {
        let noise = match self.head {
            LossHead::Gaussian => Some(self.layers.last().expect("nonempty").posterior.noise_mode().clone()),
            _ => None,
        };
        summarize_outputs(self.head, outputs, noise)
    }

    pub fn to_state(&self) -> BaliModelState {
        BaliModelState {
            specs: self.specs.clone(),
            head: self.head,
            config: self.config.clone(),
            seed: self.seed,
            t: self.t,
            emas: self.layers.iter().map(|l| l.ema.clone()).collect(),
            weights: self.weights.layers().to_vec(),
            rng_states: self.layers.iter().map(|l| l.rng.state()).collect(),
        }
    }

    pub fn from_state(state: BaliModelState) -> Result<BaliModel> {
        state.config.validate()?;
        validate_specs(&state.specs, state.head)?;
        let depth = state.specs.len();
        if state.emas.len() != depth || state.weights.len() != depth || state.rng_states.len() != depth {
            return Err(Error::Checkpoint(format!(
                "{} layers but {} averages, {} weight matrices, {} generator states",
                depth,
                state.emas.len(),
                state.weights.len(),
                state.rng_states.len()
            )));
        }
        let sigma_u_sq = state.config.noise_scale_sq();
        let mut layers = Vec::with_capacity(depth);
        let mut mean_mats = Vec::with_capacity(depth);
        for (l, spec) in state.specs.iter().enumerate() {
            let dx = spec.weight_rows();
            let dy = spec.out_dim;
            let ema = state.emas[l].clone();
            if ema.input_moment().rows() != dx || ema.target_moment().rows() != dy {
                return Err(Error::Checkpoint(format!(
                    "layer {l} averages are {}x{} but the spec wants {dx}x{dy}",
                    ema.input_moment().rows(),
                    ema.target_moment().rows()
                )));
            }
            let prior = Mniw::isotropic_prior(dx, dy, state.config.sigma_r_sq, sigma_u_sq, state.config.layer_dof0(dy))?;
            let prior_terms = MniwPriorTerms::from_prior(&prior)?;
            let posterior = if ema.bias_correction() > 0.0 {
                LayerPosterior::from_update(
                    recompute_posterior(&prior_terms, &ema, state.config.n_eff).map_err(|e| e.in_layer(l, "posterior"))?,
                )
            } else {
                initial_posterior(&prior_terms, dx, dy).map_err(|e| e.in_layer(l, "prior"))?
            };
            let rng = RngStream::restore(&state.rng_states[l]);
            mean_mats.push(posterior.params().mean().clone());
            layers.push(LayerState { prior, prior_terms, posterior, ema, rng });
        }
        let weights = NetworkWeights::new(&state.specs, state.weights)?;
        let means = NetworkWeights::new(&state.specs, mean_mats)?;
        Ok(BaliModel {
            specs: state.specs,
            head: state.head,
            config: state.config,
            seed: state.seed,
            t: state.t,
            layers,
            weights,
            means,
            history: None,
        })
    }
}

/// Folds raw network outputs from repeated draws into the head's predictive
/// summary. Gaussian heads need the noise covariance whose diagonal joins
/// the sample spread; the probability heads ignore it.
pub(crate) fn summarize_outputs(head: LossHead, outputs: Vec<Matrix>, noise: Option<Matrix>) -> Result<Prediction> {
    match head {
        LossHead::Gaussian => {
            let noise = noise
                .ok_or_else(|| Error::InvalidConfig("a gaussian predictive summary needs the noise covariance".into()))?;
            Ok(regression_summary(outputs, noise))
        }
        LossHead::SoftmaxCe => {
            let prob_samples: Vec<Matrix> = outputs.iter().map(softmax_rows).collect();
            Ok(classification_summary(&prob_samples))
        }
        LossHead::SigmoidBce => {
            let prob_samples: Vec<Matrix> = outputs
                .iter()
                .map(|z| {
                    Matrix::from_fn(z.rows(), 2, |i, j| {
                        let logit = z.get(i, 0);
                        let p = if logit >= 0.0 {
                            1.0 / (1.0 + (-logit).exp())
                        } else {
                            let e = logit.exp();
                            e / (1.0 + e)
                        };
                        if j == 1 {
                            p
                        } else {
                            1.0 - p
                        }
                    })
                })
                .collect();
            Ok(classification_summary(&prob_samples))
        }
    }
}

fn regression_summary(outputs: Vec<Matrix>, noise: Matrix) -> Prediction {
    let s = outputs.len() as f64;
    let rows = outputs[0].rows();
    let cols = outputs[0].cols();
    let mut mean = Matrix::zeros(rows, cols);
    for out in &outputs {
        mean.add_in_place(out);
    }
    mean.scale_in_place(1.0 / s);
    let mut var = Matrix::zeros(rows, cols);
    for out in &outputs {
        for i in 0..rows {
            for j in 0..cols {
                let d = out.get(i, j) - mean.get(i, j);
                var.set(i, j, var.get(i, j) + d * d);
            }
        }
    }
    var.scale_in_place(1.0 / s);
    let noise_diag = noise.diag();
    let std = Matrix::from_fn(rows, cols, |i, j| (var.get(i, j) + noise_diag[j]).sqrt());
    Prediction::Regression { mean, std, samples: outputs, noise }
}

fn classification_summary(prob_samples: &[Matrix]) -> Prediction {
    let s = prob_samples.len() as f64;
    let rows = prob_samples[0].rows();
    let cols = prob_samples[0].cols();
    let mut probs = Matrix::zeros(rows, cols);
    for p in prob_samples {
        probs.add_in_place(p);
    }
    probs.scale_in_place(1.0 / s);
    let mut var = Matrix::zeros(rows, cols);
    for p in prob_samples {
        for i in 0..rows {
            for j in 0..cols {
                let d = p.get(i, j) - probs.get(i, j);
                var.set(i, j, var.get(i, j) + d * d);
            }
        }
    }
    let prob_std = Matrix::from_fn(rows, cols, |i, j| (var.get(i, j) / s).sqrt());
    let entropy = (0..rows)
        .map(|i| {
            probs
                .row(i)
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| -p * p.ln())
                .sum::<f64>()
        })
        .collect();
    Prediction::Classification { probs, entropy, prob_std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::mniw_posterior;
    use crate::network::{chain_specs, Activation};

    fn test_config(n_eff: f64, batch_size: usize, beta: f64) -> BaliConfig {
        BaliConfig {
            alpha: 0.3,
            beta: BetaSchedule::constant(beta),
            n_eff,
            batch_size,
            sigma_r_sq: 4.0,
            sigma_u_sq: Some(0.5),
            dof0: None,
            sigma_init: 1.0,
            reparam: Reparam::Weight,
            total_iters: 100,
            pred_samples: 8,
        }
    }

    #[test]
    fn beta_schedule_decays_after_milestones() {
        let sched = BetaSchedule::StepDecay { base: 0.2, factor: 0.2, milestones: vec![0.6, 0.8] };
        assert!((sched.value(1, 100) - 0.2).abs() <= 1e-15);
        assert!((sched.value(60, 100) - 0.2).abs() <= 1e-15, "step 60 has progress 0.59");
        assert!((sched.value(61, 100) - 0.04).abs() <= 1e-15, "step 61 has progress 0.60");
        assert!((sched.value(81, 100) - 0.008).abs() <= 1e-15);
        assert!((BetaSchedule::constant(0.1).value(93, 100) - 0.1).abs() == 0.0);
    }

    #[test]
    fn first_step_pseudo_target_is_a_signed_alpha_step() {
        // One example, one unit: after the first update the debiased squared
        // gradient equals g² exactly, so the target moves by α·sign(g).
        let z = Matrix::from_rows(&[&[1.5]]);
        let g = Matrix::from_rows(&[&[2.0]]);
        let mut ema = EmaState::new(2, 1);
        ema.advance(0.7);
        ema.update_grads(0.7, &column_mean_sq(&g));
        let y = pseudo_targets(&z, &g, ema.grad_sq(), ema.bias_correction(), 0.3);
        assert!((y.get(0, 0) - 1.8).abs() <= 1e-12, "expected z + α·sign(g), got {}", y.get(0, 0));

        let g = Matrix::from_rows(&[&[-0.01]]);
        let mut ema = EmaState::new(2, 1);
        ema.advance(0.2);
        ema.update_grads(0.2, &column_mean_sq(&g));
        let y = pseudo_targets(&z, &g, ema.grad_sq(), ema.bias_correction(), 0.3);
        assert!((y.get(0, 0) - 1.2).abs() <= 1e-12, "sign step must not depend on gradient magnitude");
    }

    #[test]
    fn moment_averages_match_closed_form_unroll() {
        let mut rng = RngStream::new(41, 0);
        let betas = [0.5, 0.2, 0.9];
        let n_over_b = 4.0;
        let xs: Vec<Matrix> = (0..3).map(|_| sample_gaussian(&mut rng, 3, 2)).collect();
        let ys: Vec<Matrix> = (0..3).map(|_| sample_gaussian(&mut rng, 3, 1)).collect();
        let mut ema = EmaState::new(2, 1);
        for ((x, y), beta) in xs.iter().zip(&ys).zip(betas) {
            ema.advance(beta);
            ema.update_moments(beta, x, y, n_over_b).unwrap();
        }
        let mut expect = Matrix::zeros(2, 2);
        for (t, (x, beta)) in xs.iter().zip(betas).enumerate() {
            let survives: f64 = betas[t + 1..].iter().map(|b| 1.0 - b).product();
            expect.add_in_place(&x.tr_matmul(x).scale(beta * n_over_b * survives));
        }
        assert!(ema.input_moment().max_abs_diff(&expect) <= 1e-12, "EMA must equal its closed-form unroll");
        let complement: f64 = betas.iter().map(|b| 1.0 - b).product();
        assert!((ema.bias_correction() - (1.0 - complement)).abs() <= 1e-15);
        assert!(ema.t() == 3);
    }

    #[test]
    fn constant_beta_bias_correction_is_exact() {
        // With β = 1/4 both the running product and the closed form
        // 1 − (3/4)^t stay exactly representable, so equality is bitwise.
        let mut ema = EmaState::new(1, 1);
        for t in 1..=20 {
            ema.advance(0.25);
            assert!(
                ema.bias_correction() == 1.0 - 0.75f64.powi(t),
                "t={t}: running product drifted from the closed form"
            );
        }
    }

    #[test]
    fn repeated_full_batch_refits_reach_a_head_fixed_point() {
        // A single layer trained on the same full batch refits the exact
        // conjugate regression every step: the fit error never grows and the
        // posterior stops moving after the first step.
        let specs = chain_specs(2, &[], 1, Activation::Identity);
        let mut config = test_config(8.0, 8, 0.5);
        config.reparam = Reparam::Deterministic;
        let mut model = init_model(&specs, LossHead::Gaussian, config, 29).unwrap();
        let mut rng = RngStream::new(48, 0);
        let x = sample_gaussian(&mut rng, 8, 2);
        let y = sample_gaussian(&mut rng, 8, 1);
        let rmse = |m: &BaliModel| {
            let out = forward(&specs, m.means(), &x).unwrap().output().clone();
            (out.sub(&y).data().iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt()
        };
        let before = rmse(&model);
        let mut prev = before;
        let mut mean_after_first = None;
        for step in 0..5 {
            model.train_step(&x, &Targets::Values(y.clone())).unwrap();
            let now = rmse(&model);
            assert!(now <= prev + 1e-9, "step {step} raised the training error {prev} -> {now}");
            prev = now;
            match &mean_after_first {
                None => mean_after_first = Some(model.means().layer(0).clone()),
                Some(first) => {
                    assert!(
                        model.means().layer(0).max_abs_diff(first) <= 1e-10,
                        "identical batches must pin the posterior mean after one step"
                    );
                }
            }
        }
        assert!(prev < before, "the refit must actually reduce the error, {before} -> {prev}");
    }

    #[test]
    fn zero_statistics_recover_the_prior_up_to_dof_shift() {
        let prior = Mniw::isotropic_prior(4, 2, 9.0, 0.5, 4.0).unwrap();
        let terms = MniwPriorTerms::from_prior(&prior).unwrap();
        let mut ema = EmaState::new(4, 2);
        ema.advance(0.3);
        ema.update_grads(0.3, &[0.0, 0.0]);
        ema.update_moments(0.3, &Matrix::zeros(5, 4), &Matrix::zeros(5, 2), 2.0).unwrap();
        let update = recompute_posterior(&terms, &ema, 10.0).unwrap();
        let post = &update.posterior;
        assert!(post.mean().max_abs() == 0.0);
        assert!(post.row_scale().max_abs_diff(prior.row_scale()) <= 1e-12 * 9.0);
        assert!(post.u_scale().max_abs_diff(prior.u_scale()) <= 1e-12);
        assert!(post.dof() == 14.0, "dof must advance by the effective count even without signal");
    }

    #[test]
    fn unit_beta_full_batch_step_equals_exact_conjugate_update() {
        let specs = chain_specs(2, &[3], 1, Activation::Tanh);
        let mut config = test_config(5.0, 5, 1.0);
        config.sigma_u_sq = Some(0.4);
        let mut model = init_model(&specs, LossHead::Gaussian, config, 3).unwrap();
        model.enable_recording();
        let mut rng = RngStream::new(91, 7);
        let x = sample_gaussian(&mut rng, 5, 2);
        let y = sample_gaussian(&mut rng, 5, 1);
        model.train_step(&x, &Targets::Values(y)).unwrap();
        let history = model.take_history();
        for l in 0..specs.len() {
            let step = &history[l][0];
            let expect = mniw_posterior(&step.x, &step.y, model.layer_prior(l)).unwrap();
            let got = model.layer_posterior(l).params();
            assert!(got.mean().max_abs_diff(expect.mean()) == 0.0, "layer {l} mean must match bit for bit");
            assert!(got.row_scale().max_abs_diff(expect.row_scale()) == 0.0, "layer {l} row scale");
            assert!(got.u_scale().max_abs_diff(expect.u_scale()) == 0.0, "layer {l} scale");
            assert!(got.dof() == expect.dof(), "layer {l} dof");
        }
    }

    #[test]
    fn mean_recursion_routes_agree_on_random_history() {
        let mut rng = RngStream::new(42, 0);
        let mean0 = sample_gaussian(&mut rng, 4, 2);
        let a = sample_gaussian(&mut rng, 4, 4);
        let row_prec0 = a.matmul_tr(&a).add(&Matrix::identity(4)).scale(0.25);
        let betas = [0.3, 0.7, 1.0, 0.05, 0.5, 0.5, 0.9, 0.2];
        let steps: Vec<RecordedStep> = betas
            .iter()
            .map(|&beta| RecordedStep {
                x: sample_gaussian(&mut rng, 3, 4),
                y: sample_gaussian(&mut rng, 3, 2),
                beta,
                n_over_b: 2.5,
            })
            .collect();
        let dev = mean_recursion_check(&mean0, &row_prec0, &steps).unwrap();
        assert!(dev <= 1e-10, "the two mean update routes are algebraically equal, got {dev}");
    }

    #[test]
    fn recursion_holds_on_a_trained_model_history() {
        let specs = chain_specs(1, &[8], 1, Activation::Tanh);
        let mut model = init_model(&specs, LossHead::Gaussian, test_config(32.0, 8, 0.2), 11).unwrap();
        model.enable_recording();
        let mut rng = RngStream::new(43, 0);
        for _ in 0..12 {
            let x = sample_gaussian(&mut rng, 8, 1);
            let y = x.map(|v| (3.0 * v).sin());
            model.train_step(&x, &Targets::Values(y)).unwrap();
        }
        let history = model.take_history();
        for l in 0..specs.len() {
            let prior = model.layer_prior(l);
            let row_prec0 = crate::tensor::spd_inverse(prior.row_scale()).unwrap();
            let dev = mean_recursion_check(prior.mean(), &row_prec0, &history[l]).unwrap();
            assert!(dev <= 1e-8, "layer {l} recursion deviation {dev}");
        }
    }

    #[test]
    fn initial_weight_sample_has_requested_scale() {
        let specs = chain_specs(255, &[256], 2, Activation::Relu);
        let model = init_model(&specs, LossHead::SoftmaxCe, test_config(100.0, 10, 0.1), 5).unwrap();
        let mut count = 0usize;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for w in model.weights().layers() {
            for v in w.data() {
                count += 1;
                acc += v;
                acc2 += v * v;
            }
        }
        let mean = acc / count as f64;
        let std = (acc2 / count as f64 - mean * mean).sqrt();
        assert!(count > 60_000, "need a large sample, got {count}");
        assert!(mean.abs() <= 0.02, "initial weights must be centered, mean {mean}");
        assert!((0.98..=1.02).contains(&std), "initial weight std {std} vs sigma_init 1");

        let mut config = test_config(100.0, 10, 0.1);
        config.sigma_init = 0.5;
        let model = init_model(&specs, LossHead::SoftmaxCe, config, 5).unwrap();
        let w = model.weights().layer(0);
        let n = w.data().len() as f64;
        let std = (w.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((0.49..=0.51).contains(&std), "sigma_init must scale the sample, std {std}");
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let specs = chain_specs(2, &[6], 2, Activation::Tanh);
        let cfg = test_config(20.0, 5, 0.3);
        let mut a = init_model(&specs, LossHead::SoftmaxCe, cfg.clone(), 17).unwrap();
        let mut b = init_model(&specs, LossHead::SoftmaxCe, cfg, 17).unwrap();
        let mut rng = RngStream::new(44, 0);
        for _ in 0..3 {
            let x = sample_gaussian(&mut rng, 5, 2);
            let labels = Targets::Classes(vec![0, 1, 0, 1, 1]);
            a.train_step(&x, &labels).unwrap();
            b.train_step(&x, &labels).unwrap();
        }
        for l in 0..specs.len() {
            assert!(a.weights().layer(l).max_abs_diff(b.weights().layer(l)) == 0.0, "same seed must give identical weights");
        }
        assert!(a.to_state() == b.to_state());
    }

    #[test]
    fn deterministic_mode_trains_through_means() {
        let specs = chain_specs(1, &[4], 1, Activation::Tanh);
        let mut config = test_config(16.0, 4, 0.5);
        config.reparam = Reparam::Deterministic;
        let mut model = init_model(&specs, LossHead::Gaussian, config, 9).unwrap();
        let init_weights = model.weights().layer(0).clone();
        let mut rng = RngStream::new(45, 0);
        let x = sample_gaussian(&mut rng, 4, 1);
        let y = sample_gaussian(&mut rng, 4, 1);
        let out = model.train_step(&x, &Targets::Values(y)).unwrap();
        assert!(out.log_prob.is_finite());
        // Means start at zero, so the first pass has zero hidden activations
        // and zero hidden gradients: only the head's bias row sees signal,
        // and the hidden means sit at that symmetric point exactly.
        assert!(model.means().layer(1).max_abs() > 0.0, "head means must move");
        assert!(model.means().layer(0).max_abs() == 0.0, "hidden means stay at the symmetric point");
        assert!(
            model.weights().layer(0).max_abs_diff(&init_weights) == 0.0,
            "deterministic mode never resamples weights"
        );
    }

    #[test]
    fn local_mode_runs_and_updates_posteriors() {
        let specs = chain_specs(2, &[5], 2, Activation::LeakyTanh);
        let mut config = test_config(12.0, 6, 0.4);
        config.reparam = Reparam::Local;
        let mut model = init_model(&specs, LossHead::SoftmaxCe, config, 13).unwrap();
        let mut rng = RngStream::new(46, 0);
        let x = sample_gaussian(&mut rng, 6, 2);
        let out = model.train_step(&x, &Targets::Classes(vec![0, 1, 1, 0, 1, 0])).unwrap();
        assert!(out.log_prob.is_finite());
        assert!(model.t() == 1 && model.layer_ema(0).t() == 1);
        assert!(model.layer_posterior(0).params().dof() == model.layer_prior(0).dof() + 12.0);
    }

    #[test]
    fn state_roundtrip_continues_bit_for_bit() {
        let specs = chain_specs(2, &[6], 1, Activation::Tanh);
        let mut model = init_model(&specs, LossHead::Gaussian, test_config(24.0, 6, 0.3), 21).unwrap();
        let mut rng = RngStream::new(47, 0);
        let batches: Vec<(Matrix, Matrix)> = (0..5)
            .map(|_| (sample_gaussian(&mut rng, 6, 2), sample_gaussian(&mut rng, 6, 1)))
            .collect();
        for (x, y) in &batches[..3] {
            model.train_step(x, &Targets::Values(y.clone())).unwrap();
        }
        let json = serde_json::to_string(&model.to_state()).unwrap();
        let mut restored = BaliModel::from_state(serde_json::from_str(&json).unwrap()).unwrap();
        for (x, y) in &batches[3..] {
            model.train_step(x, &Targets::Values(y.clone())).unwrap();
            restored.train_step(x, &Targets::Values(y.clone())).unwrap();
        }
        assert!(model.to_state() == restored.to_state(), "restored model must continue identically");
    }

    #[test]
    fn regression_uses_true_targets_only_at_the_output_layer() {
        let specs = chain_specs(1, &[3], 1, Activation::Tanh);
        let mut model = init_model(&specs, LossHead::Gaussian, test_config(4.0, 4, 0.5), 2).unwrap();
        model.enable_recording();
        let mut rng = RngStream::new(48, 0);
        let x = sample_gaussian(&mut rng, 4, 1);
        let y = sample_gaussian(&mut rng, 4, 1);
        model.train_step(&x, &Targets::Values(y.clone())).unwrap();
        let history = model.take_history();
        assert!(history[1][0].y.max_abs_diff(&y) == 0.0, "output layer must regress on the actual targets");
        assert!(history[0][0].y.rows() == 4 && history[0][0].y.cols() == 3);
    }

    #[test]
    fn predictions_are_deterministic_and_mean_mode_matches_forward() {
        let specs = chain_specs(1, &[4], 1, Activation::Tanh);
        let mut model = init_model(&specs, LossHead::Gaussian, test_config(8.0, 4, 0.5), 23).unwrap();
        let mut rng = RngStream::new(49, 0);
        for _ in 0..4 {
            let x = sample_gaussian(&mut rng, 4, 1);
            let y = x.map(|v| 2.0 * v);
            model.train_step(&x, &Targets::Values(y)).unwrap();
        }
        let grid = Matrix::from_rows(&[&[-1.0], &[0.0], &[1.0]]);
        let (m1, s1) = match model.predict(&grid, 16).unwrap() {
            Prediction::Regression { mean, std, .. } => (mean, std),
            _ => unreachable!("gaussian head"),
        };
        let (m2, _) = match model.predict(&grid, 16).unwrap() {
            Prediction::Regression { mean, std, .. } => (mean, std),
            _ => unreachable!("gaussian head"),
        };
        assert!(m1.max_abs_diff(&m2) == 0.0, "prediction draws come from a fixed stream position");
        assert!(s1.data().iter().all(|v| *v > 0.0), "predictive spread includes the noise floor");

        let point = match model.predict(&grid, 1).unwrap() {
            Prediction::Regression { mean, .. } => mean,
            _ => unreachable!("gaussian head"),
        };
        let trace = forward(model.specs(), model.means(), &grid).unwrap();
        assert!(point.max_abs_diff(trace.output()) == 0.0, "single-sample prediction propagates the means");
    }

    #[test]
    fn classification_prediction_reports_calibrated_shapes() {
        let specs = chain_specs(2, &[4], 3, Activation::Tanh);
        let mut model = init_model(&specs, LossHead::SoftmaxCe, test_config(9.0, 3, 0.5), 29).unwrap();
        let mut rng = RngStream::new(50, 0);
        for _ in 0..3 {
            let x = sample_gaussian(&mut rng, 3, 2);
            model.train_step(&x, &Targets::Classes(vec![0, 1, 2])).unwrap();
        }
        let x = sample_gaussian(&mut rng, 5, 2);
        match model.predict(&x, 8).unwrap() {
            Prediction::Classification { probs, entropy, prob_std } => {
                assert!(probs.rows() == 5 && probs.cols() == 3);
                for i in 0..5 {
                    let sum: f64 = probs.row(i).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12, "averaged probabilities must normalize");
                    assert!(entropy[i] >= 0.0 && entropy[i] <= 3.0_f64.ln() + 1e-12);
                }
                assert!(prob_std.rows() == 5 && prob_std.cols() == 3);
            }
            _ => unreachable!("softmax head"),
        }
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut cfg = test_config(10.0, 5, 0.2);
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err(), "alpha 0 must be rejected");
        let mut cfg = test_config(10.0, 5, 0.2);
        cfg.beta = BetaSchedule::constant(0.0);
        assert!(cfg.validate().is_err(), "beta 0 must be rejected");
        let mut cfg = test_config(10.0, 5, 0.2);
        cfg.beta = BetaSchedule::constant(1.5);
        assert!(cfg.validate().is_err(), "beta above 1 must be rejected");
        let mut cfg = test_config(10.0, 5, 0.2);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let specs = chain_specs(2, &[4], 2, Activation::Tanh);
        assert!(init_model(&specs, LossHead::SigmoidBce, test_config(10.0, 5, 0.2), 1).is_err(), "Bernoulli head needs one logit");
    }
}
