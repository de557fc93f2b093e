//! Gradient-trained reference models: the same networks fit to a MAP point
//! with Adam, optionally with inverted dropout so Monte-Carlo dropout gives
//! them a predictive distribution. They exist for side-by-side comparisons
//! against the conjugate trainer on identical architectures and data.

use serde::{Deserialize, Serialize};

use crate::bali::{summarize_outputs, Prediction};
use crate::error::{Error, Result};
use crate::network::{
    backward_output_grads, forward, head_grads, scaled_augment, ForwardTrace, LayerSpec, LossHead,
    NetworkWeights, Targets,
};
use crate::streams;
use crate::tensor::{cholesky, sample_gaussian, CholeskyFactor, Matrix, RngState, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: applied to the weights directly, not to the moments.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> AdamConfig {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// First and second moment accumulators, one pair per weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(specs: &[LayerSpec]) -> AdamState {
        let m: Vec<Matrix> = specs.iter().map(|s| Matrix::zeros(s.weight_rows(), s.out_dim)).collect();
        let v = m.clone();
        AdamState { m, v, t: 0 }
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update with decoupled weight decay. `grads` hold
/// the descent direction (gradients of the mean loss), one matrix per layer.
pub fn adam_step(
    weights: &mut NetworkWeights,
    grads: &[Matrix],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::Shape {
            context: "adam_step",
            detail: format!(
                "{} weight matrices, {} gradients, {} moment pairs",
                weights.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - config.beta1.powi(state.t as i32);
    let bc2 = 1.0 - config.beta2.powi(state.t as i32);
    for l in 0..weights.len() {
        let w = weights.layer_mut(l);
        let g = &grads[l];
        if g.rows() != w.rows() || g.cols() != w.cols() {
            return Err(Error::Shape {
                context: "adam_step",
                detail: format!("layer {l}: gradient {}x{} vs weight {}x{}", g.rows(), g.cols(), w.rows(), w.cols()),
            });
        }
        for i in 0..w.rows() {
            let grow = g.row(i);
            let mrow = state.m[l].row_mut(i);
            for (mv, gv) in mrow.iter_mut().zip(grow) {
                *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            }
            let vrow = state.v[l].row_mut(i);
            for (vv, gv) in vrow.iter_mut().zip(grow) {
                *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            }
            for ((wv, mv), vv) in w.row_mut(i).iter_mut().zip(state.m[l].row(i)).zip(state.v[l].row(i)) {
                let update = (mv / bc1) / ((vv / bc2).sqrt() + config.eps) + config.weight_decay * *wv;
                *wv -= config.lr * update;
            }
        }
    }
    Ok(())
}

/// Gradients of the mean negative log-likelihood with respect to every
/// weight matrix, assembled from the layer inputs recorded in the trace and
/// the pre-activation log-likelihood gradients (the ascent convention flips
/// to descent here): ∂loss/∂W_l = −(1/B)·X_lᵀG_l.
pub fn loss_weight_grads(trace: &ForwardTrace, preact_grads: &[Matrix]) -> Vec<Matrix> {
    let b = trace.batch_size().max(1) as f64;
    trace
        .inputs
        .iter()
        .zip(preact_grads)
        .map(|(x, g)| x.tr_matmul(g).scale(-1.0 / b))
        .collect()
}

/// Per-hidden-layer keep masks with inverted scaling: entries are 0 with
/// probability p and 1/(1−p) otherwise, so masked activations keep their
/// expectation and evaluation without masks needs no rescaling.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    masks: Vec<Matrix>,
}

impl DropoutMask {
    pub fn sample(specs: &[LayerSpec], batch: usize, p: f64, rng: &mut RngStream) -> Result<DropoutMask> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        let keep = 1.0 / (1.0 - p);
        let masks = specs[..specs.len().saturating_sub(1)]
            .iter()
            .map(|s| Matrix::from_fn(batch, s.out_dim, |_, _| if rng.uniform(0.0, 1.0) < p { 0.0 } else { keep }))
            .collect();
        Ok(DropoutMask { masks })
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.masks[l]
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Forward pass with the given masks multiplied into the hidden activations
/// after the nonlinearity. The trace records the masked scaled inputs so
/// weight gradients line up with what the network actually computed.
pub fn forward_dropout(
    specs: &[LayerSpec],
    weights: &NetworkWeights,
    x: &Matrix,
    mask: &DropoutMask,
) -> Result<ForwardTrace> {
    if specs.is_empty() || mask.len() + 1 != specs.len() {
        return Err(Error::Shape {
            context: "forward_dropout",
            detail: format!("{} masks for {} layers", mask.len(), specs.len()),
        });
    }
    if x.cols() != specs[0].in_dim {
        return Err(Error::Shape {
            context: "forward_dropout",
            detail: format!("input width {} but first layer wants {}", x.cols(), specs[0].in_dim),
        });
    }
    let depth = specs.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut preacts = Vec::with_capacity(depth);
    let mut layer_in = scaled_augment(x);
    for (l, spec) in specs.iter().enumerate() {
        let z = layer_in.matmul(weights.layer(l));
        if l + 1 < depth {
            let m = mask.layer(l);
            if m.rows() != z.rows() || m.cols() != z.cols() {
                return Err(Error::Shape {
                    context: "forward_dropout",
                    detail: format!("layer {l} mask {}x{} vs activations {}x{}", m.rows(), m.cols(), z.rows(), z.cols()),
                });
            }
            let mut h = z.map(|v| spec.activation.apply(v));
            for i in 0..h.rows() {
                for (hv, mv) in h.row_mut(i).iter_mut().zip(m.row(i)) {
                    *hv *= mv;
                }
            }
            inputs.push(layer_in);
            layer_in = scaled_augment(&h);
        } else {
            inputs.push(layer_in);
            layer_in = Matrix::zeros(0, 0);
        }
        preacts.push(z);
    }
    Ok(ForwardTrace { inputs, preacts })
}

/// Backward pass matching `forward_dropout`: the mask joins the activation
/// derivative wherever the gradient crosses a hidden layer.
pub fn backward_dropout(
    specs: &[LayerSpec],
    weights: &NetworkWeights,
    trace: &ForwardTrace,
    mask: &DropoutMask,
    output_grad: &Matrix,
) -> Result<Vec<Matrix>> {
    let depth = specs.len();
    if trace.preacts.len() != depth || mask.len() + 1 != depth {
        return Err(Error::Shape {
            context: "backward_dropout",
            detail: format!("trace has {} layers, {} masks, specs {}", trace.preacts.len(), mask.len(), depth),
        });
    }
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    grads[depth - 1] = output_grad.clone();
    for l in (0..depth - 1).rev() {
        let w_next = weights.layer(l + 1);
        let feature_rows = w_next.rows() - 1;
        let mut w_tilde = Matrix::zeros(feature_rows, w_next.cols());
        for r in 0..feature_rows {
            w_tilde.row_mut(r).copy_from_slice(w_next.row(r));
        }
        let scale = 1.0 / ((specs[l].out_dim + 1) as f64).sqrt();
        let mut g = grads[l + 1].matmul_tr(&w_tilde);
        let z = &trace.preacts[l];
        let m = mask.layer(l);
        for i in 0..g.rows() {
            let zrow = z.row(i);
            let mrow = m.row(i);
            for ((gv, zv), mv) in g.row_mut(i).iter_mut().zip(zrow).zip(mrow) {
                *gv *= scale * specs[l].activation.derivative(*zv) * mv;
            }
        }
        grads[l] = g;
    }
    Ok(grads)
}

/// A network trained to a MAP point with Adam. With a nonzero dropout
/// probability the same model doubles as the Monte-Carlo dropout baseline:
/// masks are drawn while training and again, from a dedicated stream, when
/// predicting.
#[derive(Clone, Debug)]
pub struct MapModel {
    specs: Vec<LayerSpec>,
    head: LossHead,
    adam_config: AdamConfig,
    dropout_p: f64,
    noise_var: f64,
    seed: u64,
    weights: NetworkWeights,
    opt: AdamState,
    mask_rng: RngStream,
    noise_chol: Option<CholeskyFactor>,
}

/// Serializable snapshot of a MAP model; restoring it continues training
/// bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapModelState {
    pub specs: Vec<LayerSpec>,
    pub head: LossHead,
    pub adam_config: AdamConfig,
    pub dropout_p: f64,
    pub noise_var: f64,
    pub seed: u64,
    pub weights: Vec<Matrix>,
    pub opt: AdamState,
    pub mask_rng: RngState,
}

impl MapModel {
    pub fn new(
        specs: &[LayerSpec],
        head: LossHead,
        adam_config: AdamConfig,
        dropout_p: f64,
        noise_var: f64,
        sigma_init: f64,
        seed: u64,
    ) -> Result<MapModel> {
        adam_config.validate()?;
        if specs.is_empty() {
            return Err(Error::InvalidConfig("a network needs at least one layer".into()));
        }
        if head == LossHead::SigmoidBce && specs.last().unwrap().out_dim != 1 {
            return Err(Error::InvalidConfig("the binary head needs a single logit column".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::InvalidConfig(format!("dropout probability must lie in [0, 1), got {dropout_p}")));
        }
        if head == LossHead::Gaussian && !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise variance must be positive, got {noise_var}")));
        }
        if !(sigma_init >= 0.0 && sigma_init.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_init must be non-negative, got {sigma_init}")));
        }
        let mut init_rng = RngStream::new(seed, streams::BASELINE_INIT);
        let mats = specs
            .iter()
            .map(|s| sample_gaussian(&mut init_rng, s.weight_rows(), s.out_dim).scale(sigma_init))
            .collect();
        let weights = NetworkWeights::new(specs, mats)?;
        let noise_chol = match head {
            LossHead::Gaussian => {
                let dy = specs.last().unwrap().out_dim;
                Some(cholesky(&Matrix::identity(dy).scale(noise_var), 0.0)?)
            }
            _ => None,
        };
        Ok(MapModel {
            specs: specs.to_vec(),
            head,
            adam_config,
            dropout_p,
            noise_var,
            seed,
            weights,
            opt: AdamState::new(specs),
            mask_rng: RngStream::new(seed, streams::DROPOUT),
            noise_chol,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn steps(&self) -> u64 {
        self.opt.t()
    }

    /// One Adam step on the mean negative log-likelihood of the batch,
    /// through fresh dropout masks when enabled. Returns the batch loss the
    /// gradients were computed from.
    pub fn train_step(&mut self, x: &Matrix, targets: &Targets) -> Result<f64> {
        if targets.len() != x.rows() {
            return Err(Error::Shape {
                context: "MapModel::train_step",
                detail: format!("{} rows but {} targets", x.rows(), targets.len()),
            });
        }
        let (trace, mask) = if self.dropout_p > 0.0 {
            let mask = DropoutMask::sample(&self.specs, x.rows(), self.dropout_p, &mut self.mask_rng)?;
            (forward_dropout(&self.specs, &self.weights, x, &mask)?, Some(mask))
        } else {
            (forward(&self.specs, &self.weights, x)?, None)
        };
        let head_out = head_grads(self.head, trace.output(), targets, self.noise_chol.as_ref())?;
        let preact_grads = match &mask {
            Some(m) => backward_dropout(&self.specs, &self.weights, &trace, m, &head_out.grad)?,
            None => backward_output_grads(&self.specs, &self.weights, &trace, &head_out.grad)?,
        };
        let grads = loss_weight_grads(&trace, &preact_grads);
        adam_step(&mut self.weights, &grads, &mut self.opt, &self.adam_config)?;
        Ok(-head_out.log_prob / x.rows() as f64)
    }

    /// Mean negative log-likelihood of a batch under the current weights,
    /// evaluated without dropout.
    pub fn loss(&self, x: &Matrix, targets: &Targets) -> Result<f64> {
        if targets.len() != x.rows() {
            return Err(Error::Shape {
                context: "MapModel::loss",
                detail: format!("{} rows but {} targets", x.rows(), targets.len()),
            });
        }
        let trace = forward(&self.specs, &self.weights, x)?;
        let head_out = head_grads(self.head, trace.output(), targets, self.noise_chol.as_ref())?;
        Ok(-head_out.log_prob / x.rows() as f64)
    }

    /// Predictive summary. With dropout enabled and more than one sample
    /// requested this is Monte-Carlo dropout over fresh masks from a
    /// dedicated stream at a fixed position, so repeated calls agree and
    /// never disturb training; otherwise a single clean forward pass.
    pub fn predict(&self, x: &Matrix, n_samples: usize) -> Result<Prediction> {
        let outputs = if self.dropout_p > 0.0 && n_samples > 1 {
            let mut rng = RngStream::new(self.seed, streams::PREDICT);
            let mut outs = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let mask = DropoutMask::sample(&self.specs, x.rows(), self.dropout_p, &mut rng)?;
                outs.push(forward_dropout(&self.specs, &self.weights, x, &mask)?.output().clone());
            }
            outs
        } else {
            vec![forward(&self.specs, &self.weights, x)?.output().clone()]
        };
        let noise = match self.head {
            LossHead::Gaussian => {
                let dy = self.specs.last().expect("nonempty").out_dim;
                Some(Matrix::identity(dy).scale(self.noise_var))
            }
            _ => None,
        };
        summarize_outputs(self.head, outputs, noise)
    }

    pub fn to_state(&self) -> MapModelState {
        MapModelState {
            specs: self.specs.clone(),
            head: self.head,
            adam_config: self.adam_config,
            dropout_p: self.dropout_p,
            noise_var: self.noise_var,
            seed: self.seed,
            weights: self.weights.layers().to_vec(),
            opt: self.opt.clone(),
            mask_rng: self.mask_rng.state(),
        }
    }

    pub fn from_state(state: MapModelState) -> Result<MapModel> {
        state.adam_config.validate()?;
        let weights = NetworkWeights::new(&state.specs, state.weights)?;
        if state.opt.m.len() != state.specs.len() || state.opt.v.len() != state.specs.len() {
            return Err(Error::Checkpoint(format!(
                "{} layers but {}+{} optimizer moment matrices",
                state.specs.len(),
                state.opt.m.len(),
                state.opt.v.len()
            )));
        }
        let noise_chol = match state.head {
            LossHead::Gaussian => {
                let dy = state.specs.last().map_or(0, |s| s.out_dim);
                Some(cholesky(&Matrix::identity(dy).scale(state.noise_var), 0.0)?)
            }
            _ => None,
        };
        Ok(MapModel {
            specs: state.specs,
            head: state.head,
            adam_config: state.adam_config,
            dropout_p: state.dropout_p,
            noise_var: state.noise_var,
            seed: state.seed,
            weights,
            opt: state.opt,
            mask_rng: RngStream::restore(&state.mask_rng),
            noise_chol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{chain_specs, Activation};

    fn single_spec(rows: usize, cols: usize) -> Vec<LayerSpec> {
        vec![LayerSpec { in_dim: rows - 1, out_dim: cols, activation: Activation::Identity }]
    }

    #[test]
    fn first_adam_step_is_a_signed_learning_rate_step() {
        let specs = single_spec(3, 2);
        let w0 = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let mut weights = NetworkWeights::new(&specs, vec![w0.clone()]).unwrap();
        let g = Matrix::from_rows(&[&[2.0, -0.5], &[0.01, -3.0], &[1e-4, 7.0]]);
        let mut state = AdamState::new(&specs);
        let config = AdamConfig::new(0.05, 0.0);
        adam_step(&mut weights, &[g.clone()], &mut state, &config).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let delta = weights.layer(0).get(i, j) - w0.get(i, j);
                let expect = -0.05 * g.get(i, j).signum();
                assert!(
                    (delta - expect).abs() <= 0.05 * 1e-3,
                    "entry ({i},{j}): first step {delta} should be -lr*sign, expected {expect}"
                );
            }
        }
        assert!(state.t() == 1);
    }

    #[test]
    fn constant_gradient_steps_approach_the_learning_rate() {
        let specs = single_spec(2, 1);
        let mut weights = NetworkWeights::new(&specs, vec![Matrix::zeros(2, 1)]).unwrap();
        let g = Matrix::from_rows(&[&[0.37], &[-4.2]]);
        let mut state = AdamState::new(&specs);
        let config = AdamConfig::new(0.01, 0.0);
        let mut prev = Matrix::zeros(2, 1);
        for _ in 0..200 {
            prev = weights.layer(0).clone();
            adam_step(&mut weights, &[g.clone()], &mut state, &config).unwrap();
        }
        for i in 0..2 {
            let step = (weights.layer(0).get(i, 0) - prev.get(i, 0)).abs();
            assert!(
                (0.999 * 0.01..=0.01).contains(&step),
                "late constant-gradient step {step} should be the learning rate"
            );
        }
    }

    #[test]
    fn zero_gradients_leave_weights_alone_or_decay_them_exactly() {
        let specs = single_spec(2, 2);
        let w0 = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 8.0]]);
        let zero = Matrix::zeros(2, 2);

        let mut weights = NetworkWeights::new(&specs, vec![w0.clone()]).unwrap();
        let mut state = AdamState::new(&specs);
        for _ in 0..5 {
            adam_step(&mut weights, &[zero.clone()], &mut state, &AdamConfig::new(0.1, 0.0)).unwrap();
        }
        assert!(weights.layer(0).max_abs_diff(&w0) == 0.0, "no gradient and no decay must not move weights");

        let mut weights = NetworkWeights::new(&specs, vec![w0.clone()]).unwrap();
        let mut state = AdamState::new(&specs);
        let config = AdamConfig::new(0.1, 0.02);
        let mut expect = w0.clone();
        for _ in 0..7 {
            adam_step(&mut weights, &[zero.clone()], &mut state, &config).unwrap();
            expect = expect.map(|w| w - 0.1 * (0.02 * w));
        }
        assert!(weights.layer(0).max_abs_diff(&expect) == 0.0, "decoupled decay must follow the exact recurrence");
    }

    #[test]
    fn adam_descends_a_random_quadratic() {
        let specs = single_spec(4, 3);
        let mut rng = RngStream::new(71, 0);
        let target = sample_gaussian(&mut rng, 4, 3);
        let curv = Matrix::from_fn(4, 3, |_, _| rng.uniform(0.5, 3.0));
        let mut weights = NetworkWeights::new(&specs, vec![sample_gaussian(&mut rng, 4, 3)]).unwrap();
        let mut state = AdamState::new(&specs);
        let config = AdamConfig::new(0.05, 0.0);
        let loss = |w: &Matrix| -> f64 {
            (0..4)
                .flat_map(|i| (0..3).map(move |j| (i, j)))
                .map(|(i, j)| 0.5 * curv.get(i, j) * (w.get(i, j) - target.get(i, j)).powi(2))
                .sum()
        };
        let initial = loss(weights.layer(0));
        for _ in 0..100 {
            let w = weights.layer(0);
            let g = Matrix::from_fn(4, 3, |i, j| curv.get(i, j) * (w.get(i, j) - target.get(i, j)));
            adam_step(&mut weights, &[g], &mut state, &config).unwrap();
        }
        let last = loss(weights.layer(0));
        assert!(last < 0.1 * initial, "quadratic loss should collapse, {initial} -> {last}");
    }

    #[test]
    fn weight_gradients_match_finite_differences_through_dropout() {
        let specs = chain_specs(2, &[4, 3], 1, Activation::Tanh);
        let mut rng = RngStream::new(72, 0);
        let mats: Vec<Matrix> = specs.iter().map(|s| sample_gaussian(&mut rng, s.weight_rows(), s.out_dim)).collect();
        let weights = NetworkWeights::new(&specs, mats).unwrap();
        let x = sample_gaussian(&mut rng, 5, 2);
        let y = sample_gaussian(&mut rng, 5, 1);
        let targets = Targets::Values(y.clone());
        let chol = cholesky(&Matrix::identity(1).scale(0.3), 0.0).unwrap();
        let mask = DropoutMask::sample(&specs, 5, 0.4, &mut rng).unwrap();

        let loss = |w: &NetworkWeights| -> f64 {
            let trace = forward_dropout(&specs, w, &x, &mask).unwrap();
            -head_grads(LossHead::Gaussian, trace.output(), &targets, Some(&chol)).unwrap().log_prob / 5.0
        };

        let trace = forward_dropout(&specs, &weights, &x, &mask).unwrap();
        let head_out = head_grads(LossHead::Gaussian, trace.output(), &targets, Some(&chol)).unwrap();
        let preact_grads = backward_dropout(&specs, &weights, &trace, &mask, &head_out.grad).unwrap();
        let grads = loss_weight_grads(&trace, &preact_grads);

        let eps = 1e-6;
        for l in 0..specs.len() {
            for i in 0..weights.layer(l).rows() {
                for j in 0..weights.layer(l).cols() {
                    let mut wp = weights.clone();
                    wp.layer_mut(l).set(i, j, weights.layer(l).get(i, j) + eps);
                    let mut wm = weights.clone();
                    wm.layer_mut(l).set(i, j, weights.layer(l).get(i, j) - eps);
                    let fd = (loss(&wp) - loss(&wm)) / (2.0 * eps);
                    let an = grads[l].get(i, j);
                    let denom = an.abs().max(fd.abs()).max(0.01);
                    assert!(
                        (fd - an).abs() / denom <= 1e-5,
                        "layer {l} entry ({i},{j}): analytic {an} vs finite difference {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn mask_entries_are_inverted_bernoulli_and_unbiased() {
        let specs = chain_specs(1, &[64], 1, Activation::Tanh);
        let mut rng = RngStream::new(73, 0);
        let mask = DropoutMask::sample(&specs, 512, 0.3, &mut rng).unwrap();
        assert!(mask.len() == 1, "masks cover hidden layers only");
        let m = mask.layer(0);
        let keep = 1.0 / 0.7;
        let mut total = 0.0;
        for v in m.data() {
            assert!(*v == 0.0 || *v == keep, "mask entry {v} must be 0 or 1/(1-p)");
            total += v;
        }
        let mean = total / m.data().len() as f64;
        assert!((mean - 1.0).abs() <= 0.02, "inverted masks are unbiased, sample mean {mean}");
    }

    #[test]
    fn zero_probability_masks_reproduce_the_plain_passes_bitwise() {
        let specs = chain_specs(3, &[5, 4], 2, Activation::LeakyTanh);
        let mut rng = RngStream::new(74, 0);
        let mats: Vec<Matrix> = specs.iter().map(|s| sample_gaussian(&mut rng, s.weight_rows(), s.out_dim)).collect();
        let weights = NetworkWeights::new(&specs, mats).unwrap();
        let x = sample_gaussian(&mut rng, 6, 3);
        let mask = DropoutMask::sample(&specs, 6, 0.0, &mut rng).unwrap();

        let plain = forward(&specs, &weights, &x).unwrap();
        let masked = forward_dropout(&specs, &weights, &x, &mask).unwrap();
        for l in 0..specs.len() {
            assert!(masked.preacts[l].max_abs_diff(&plain.preacts[l]) == 0.0, "layer {l} pre-activations");
            assert!(masked.inputs[l].max_abs_diff(&plain.inputs[l]) == 0.0, "layer {l} inputs");
        }

        let grad = sample_gaussian(&mut rng, 6, 2);
        let a = backward_output_grads(&specs, &weights, &plain, &grad).unwrap();
        let b = backward_dropout(&specs, &weights, &masked, &mask, &grad).unwrap();
        for l in 0..specs.len() {
            assert!(a[l].max_abs_diff(&b[l]) == 0.0, "layer {l} backward");
        }
    }

    #[test]
    fn map_training_reduces_regression_loss() {
        let specs = chain_specs(1, &[16], 1, Activation::Tanh);
        let mut model =
            MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.02, 0.0), 0.0, 0.05, 0.3, 7).unwrap();
        let mut rng = RngStream::new(75, 0);
        let x = sample_gaussian(&mut rng, 32, 1);
        let y = x.map(|v| (2.0 * v).sin());
        let targets = Targets::Values(y);
        let initial = model.loss(&x, &targets).unwrap();
        for _ in 0..300 {
            model.train_step(&x, &targets).unwrap();
        }
        let last = model.loss(&x, &targets).unwrap();
        assert!(last < 0.5 * initial, "MAP training should cut the loss, {initial} -> {last}");
        assert!(model.steps() == 300);
    }

    #[test]
    fn prediction_without_dropout_is_the_clean_forward_pass() {
        let specs = chain_specs(2, &[8], 2, Activation::Tanh);
        let model =
            MapModel::new(&specs, LossHead::SoftmaxCe, AdamConfig::new(0.01, 0.0), 0.0, 1.0, 0.5, 11).unwrap();
        let mut rng = RngStream::new(76, 0);
        let x = sample_gaussian(&mut rng, 4, 2);
        match model.predict(&x, 16).unwrap() {
            Prediction::Classification { probs, prob_std, .. } => {
                assert!(prob_std.max_abs() == 0.0, "no dropout means no spread across samples");
                for i in 0..4 {
                    let sum: f64 = probs.row(i).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
            _ => panic!("softmax head must produce a classification summary"),
        }

        let specs = chain_specs(1, &[4], 1, Activation::Tanh);
        let model =
            MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.01, 0.0), 0.0, 0.09, 0.5, 12).unwrap();
        let x = sample_gaussian(&mut rng, 3, 1);
        let clean = forward(&specs, model.weights(), &x).unwrap().output().clone();
        match model.predict(&x, 8).unwrap() {
            Prediction::Regression { mean, std, .. } => {
                assert!(mean.max_abs_diff(&clean) == 0.0, "point prediction is the deterministic forward");
                for v in std.data() {
                    assert!((v - 0.3).abs() <= 1e-12, "spread collapses to the noise floor, got {v}");
                }
            }
            _ => panic!("gaussian head must produce a regression summary"),
        }
    }

    #[test]
    fn monte_carlo_dropout_is_deterministic_and_consistent_for_small_p() {
        let specs = chain_specs(2, &[12], 3, Activation::Tanh);
        let model =
            MapModel::new(&specs, LossHead::SoftmaxCe, AdamConfig::new(0.01, 0.0), 0.05, 1.0, 0.8, 13).unwrap();
        let mut rng = RngStream::new(77, 0);
        let x = sample_gaussian(&mut rng, 10, 2);
        let first = model.predict(&x, 64).unwrap();
        let second = model.predict(&x, 64).unwrap();
        let (Prediction::Classification { probs: p1, .. }, Prediction::Classification { probs: p2, .. }) =
            (&first, &second)
        else {
            panic!("softmax head must produce classification summaries");
        };
        assert!(p1.max_abs_diff(p2) == 0.0, "repeated prediction must reuse the same mask stream");

        let clean = model.predict(&x, 1).unwrap();
        let Prediction::Classification { probs: p0, .. } = &clean else {
            panic!("point prediction is still a classification summary");
        };
        assert!(p1.max_abs_diff(p0) <= 0.05, "small dropout keeps the averaged probabilities close");
    }

    #[test]
    fn map_state_roundtrip_continues_bit_for_bit() {
        let specs = chain_specs(2, &[6], 1, Activation::Tanh);
        let mut model =
            MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.01, 0.001), 0.1, 0.04, 0.5, 19).unwrap();
        let mut rng = RngStream::new(78, 0);
        let batches: Vec<(Matrix, Matrix)> = (0..5)
            .map(|_| (sample_gaussian(&mut rng, 6, 2), sample_gaussian(&mut rng, 6, 1)))
            .collect();
        for (x, y) in &batches[..3] {
            model.train_step(x, &Targets::Values(y.clone())).unwrap();
        }
        let json = serde_json::to_string(&model.to_state()).unwrap();
        let mut restored = MapModel::from_state(serde_json::from_str(&json).unwrap()).unwrap();
        for (x, y) in &batches[3..] {
            model.train_step(x, &Targets::Values(y.clone())).unwrap();
            restored.train_step(x, &Targets::Values(y.clone())).unwrap();
        }
        assert!(model.to_state() == restored.to_state(), "restored model must continue identically");
        for l in 0..specs.len() {
            assert!(model.weights().layer(l).max_abs_diff(restored.weights().layer(l)) == 0.0);
        }
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let specs = chain_specs(1, &[2], 1, Activation::Tanh);
        assert!(MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.0, 0.0), 0.0, 0.1, 1.0, 1).is_err());
        assert!(MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.01, -0.1), 0.0, 0.1, 1.0, 1).is_err());
        assert!(MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.01, 0.0), 1.0, 0.1, 1.0, 1).is_err());
        assert!(MapModel::new(&specs, LossHead::Gaussian, AdamConfig::new(0.01, 0.0), 0.0, 0.0, 1.0, 1).is_err());
        let wide = chain_specs(1, &[2], 3, Activation::Tanh);
        assert!(MapModel::new(&wide, LossHead::SigmoidBce, AdamConfig::new(0.01, 0.0), 0.0, 1.0, 1.0, 1).is_err());
        let mut rng = RngStream::new(79, 0);
        assert!(DropoutMask::sample(&specs, 4, -0.1, &mut rng).is_err());
    }
}
