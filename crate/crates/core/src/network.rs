//! Feed-forward network in the scaled homogeneous basis.
//!
//! Every layer input carries an appended bias coordinate and is divided by
//! the square root of its width: the first layer sees [x; 1]/√(D_in+1) and
//! layer l sees [h(z_{l-1}); 1]/√(D_{l-1}+1). Weights therefore have one
//! more row than the incoming feature count, with the bias row last, and a
//! layer computes z_l = x_lᵀW_l batch-wise as z = X·W. The scaling keeps
//! activations O(1) at any width so one prior scale works across
//! architectures.
//!
//! Loss heads return the total log-probability of the batch and its
//! gradient with respect to the network output (ascent convention), which
//! is what both the pseudo-target construction and the gradient baselines
//! consume.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CholeskyFactor, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    LeakyTanh,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::LeakyTanh => v.tanh() + 0.1 * v,
            Activation::Identity => v,
        }
    }

    /// Derivative at v; the ReLU kink at zero takes the left value 0.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - v.tanh().powi(2),
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyTanh => 1.0 - v.tanh().powi(2) + 0.1,
            Activation::Identity => 1.0,
        }
    }
}

/// Which likelihood the final layer output feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHead {
    Gaussian,
    SoftmaxCe,
    SigmoidBce,
}

/// One layer: raw input width (without the bias coordinate), output width,
/// and the nonlinearity applied when this layer's output feeds the next.
/// The last layer's activation is never applied; the head consumes z_L raw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    /// Rows of this layer's weight matrix (input width plus bias).
    pub fn weight_rows(&self) -> usize {
        self.in_dim + 1
    }
}

/// Builds the spec chain for input → hidden… → output with a shared hidden
/// activation; the output layer gets Identity.
pub fn chain_specs(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input_dim;
    for &width in hidden {
        specs.push(LayerSpec { in_dim: prev, out_dim: width, activation });
        prev = width;
    }
    specs.push(LayerSpec { in_dim: prev, out_dim: output_dim, activation: Activation::Identity });
    specs
}

/// Per-layer weight matrices, shape-checked against a spec chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    layers: Vec<Matrix>,
}

impl NetworkWeights {
    pub fn new(specs: &[LayerSpec], layers: Vec<Matrix>) -> Result<Self> {
        if specs.len() != layers.len() {
            return Err(Error::Shape {
                context: "NetworkWeights::new",
                detail: format!("{} specs vs {} weight matrices", specs.len(), layers.len()),
            });
        }
        for (l, (spec, w)) in specs.iter().zip(&layers).enumerate() {
            if w.rows() != spec.weight_rows() || w.cols() != spec.out_dim {
                return Err(Error::Shape {
                    context: "NetworkWeights::new",
                    detail: format!(
                        "layer {l}: weight {}x{} but spec wants {}x{}",
                        w.rows(),
                        w.cols(),
                        spec.weight_rows(),
                        spec.out_dim
                    ),
                });
            }
            if l + 1 < specs.len() && specs[l + 1].in_dim != spec.out_dim {
                return Err(Error::Shape {
                    context: "NetworkWeights::new",
                    detail: format!("layer {l} out_dim {} feeds layer {} in_dim {}", spec.out_dim, l + 1, specs[l + 1].in_dim),
                });
            }
        }
        Ok(NetworkWeights { layers })
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut Matrix {
        &mut self.layers[l]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Everything the forward pass touched: per-layer scaled inputs x_l
/// (B×(D_{l-1}+1)) and pre-activations z_l (B×D_l). The last z is the
/// network output.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.preacts.last().expect("forward trace of an empty network")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Appends the bias coordinate to each row of `h` and divides everything by
/// √(width+1). This is the basis every layer consumes; exposing it lets
/// reparameterised forward passes and diagnostics build layer inputs exactly
/// the way `forward` does.
pub fn scaled_augment(h: &Matrix) -> Matrix {
    let scale = 1.0 / ((h.cols() + 1) as f64).sqrt();
    let mut out = Matrix::zeros(h.rows(), h.cols() + 1);
    for i in 0..h.rows() {
        let src = h.row(i);
        let dst = out.row_mut(i);
        for (d, s) in dst[..src.len()].iter_mut().zip(src) {
            *d = s * scale;
        }
        dst[src.len()] = scale;
    }
    out
}

pub fn forward(specs: &[LayerSpec], weights: &NetworkWeights, x: &Matrix) -> Result<ForwardTrace> {
    if specs.is_empty() {
        return Err(Error::Shape { context: "forward", detail: "no layers".into() });
    }
    if weights.len() != specs.len() {
        return Err(Error::Shape {
            context: "forward",
            detail: format!("{} weight matrices for {} layers", weights.len(), specs.len()),
        });
    }
    if x.cols() != specs[0].in_dim {
        return Err(Error::Shape {
            context: "forward",
            detail: format!("input width {} but first layer wants {}", x.cols(), specs[0].in_dim),
        });
    }
    let mut inputs = Vec::with_capacity(specs.len());
    let mut preacts = Vec::with_capacity(specs.len());
    let mut layer_in = scaled_augment(x);
    for (l, spec) in specs.iter().enumerate() {
        let z = layer_in.matmul(weights.layer(l));
        if l + 1 < specs.len() {
            let h = z.map(|v| spec.activation.apply(v));
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

/// Resumes the forward pass with `z` substituted for the pre-activations of
/// layer `layer`, returning the network output. Used to probe how the output
/// depends on an intermediate pre-activation (finite-difference checks and
/// diagnostics).
pub fn forward_from(specs: &[LayerSpec], weights: &NetworkWeights, layer: usize, z: &Matrix) -> Result<Matrix> {
    if layer >= specs.len() {
        return Err(Error::Shape {
            context: "forward_from",
            detail: format!("layer {layer} out of range for {} layers", specs.len()),
        });
    }
    if z.cols() != specs[layer].out_dim {
        return Err(Error::Shape {
            context: "forward_from",
            detail: format!("z width {} but layer {layer} emits {}", z.cols(), specs[layer].out_dim),
        });
    }
    let mut current = z.clone();
    for l in layer..specs.len() {
        if l + 1 == specs.len() {
            return Ok(current);
        }
        let h = current.map(|v| specs[l].activation.apply(v));
        current = scaled_augment(&h).matmul(weights.layer(l + 1));
    }
    unreachable!("loop returns at the last layer");
}

/// Batch log-probability and its gradient with respect to the final-layer
/// pre-activations (ascent convention: this is the gradient of the
/// log-likelihood, not of a loss).
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub log_prob: f64,
    pub grad: Matrix,
}

/// Back-propagates a final-layer gradient through the chain, returning the
/// log-probability gradient with respect to every layer's pre-activations.
/// The bias row of each weight matrix carries no signal backwards; the
/// 1/√(D_l+1) input scaling does.
pub fn backward_output_grads(
    specs: &[LayerSpec],
    weights: &NetworkWeights,
    trace: &ForwardTrace,
    output_grad: &Matrix,
) -> Result<Vec<Matrix>> {
    let depth = specs.len();
    if trace.preacts.len() != depth {
        return Err(Error::Shape {
            context: "backward_output_grads",
            detail: format!("trace has {} layers, specs {}", trace.preacts.len(), depth),
        });
    }
    let last = &trace.preacts[depth - 1];
    if output_grad.rows() != last.rows() || output_grad.cols() != last.cols() {
        return Err(Error::Shape {
            context: "backward_output_grads",
            detail: format!(
                "output grad {}x{} vs output {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                last.rows(),
                last.cols()
            ),
        });
    }
    let mut grads = vec![Matrix::zeros(0, 0); depth];
    grads[depth - 1] = output_grad.clone();
    for l in (0..depth - 1).rev() {
        let w_next = weights.layer(l + 1);
        // Drop the bias row: only the feature rows couple to h(z_l).
        let feature_rows = w_next.rows() - 1;
        let mut w_tilde = Matrix::zeros(feature_rows, w_next.cols());
        for r in 0..feature_rows {
            w_tilde.row_mut(r).copy_from_slice(w_next.row(r));
        }
        let scale = 1.0 / ((specs[l].out_dim + 1) as f64).sqrt();
        let mut g = grads[l + 1].matmul_tr(&w_tilde);
        let z = &trace.preacts[l];
        for i in 0..g.rows() {
            let zrow = z.row(i);
            for (gv, zv) in g.row_mut(i).iter_mut().zip(zrow) {
                *gv *= scale * specs[l].activation.derivative(*zv);
            }
        }
        grads[l] = g;
    }
    Ok(grads)
}

/// Gaussian likelihood with full noise covariance Σ (given by its Cholesky
/// factor): log p = −½ Σₙ (Dy ln 2π + ln|Σ| + rₙᵀΣ⁻¹rₙ) with rₙ = yₙ − zₙ,
/// and ∂ log p/∂z = RΣ⁻¹ row-wise.
pub fn gaussian_nll_grad(z: &Matrix, y: &Matrix, sigma_chol: &CholeskyFactor) -> Result<OutputGrads> {
    if z.rows() != y.rows() || z.cols() != y.cols() || sigma_chol.dim() != z.cols() {
        return Err(Error::Shape {
            context: "gaussian_nll_grad",
            detail: format!("z {}x{}, y {}x{}, Σ dim {}", z.rows(), z.cols(), y.rows(), y.cols(), sigma_chol.dim()),
        });
    }
    let residual = y.sub(z);
    // grad = R·Σ⁻¹, computed as (Σ⁻¹Rᵀ)ᵀ through two triangular solves.
    let grad = sigma_chol.solve_mat(&residual.transpose()).transpose();
    let quad: f64 = residual.data().iter().zip(grad.data()).map(|(r, g)| r * g).sum();
    let b = z.rows() as f64;
    let dy = z.cols() as f64;
    let log_prob = -0.5 * (b * (dy * (2.0 * std::f64::consts::PI).ln() + sigma_chol.logdet()) + quad);
    Ok(OutputGrads { log_prob, grad })
}

/// Categorical cross-entropy head: log p = Σₙ (z_{n,yₙ} − logsumexp(zₙ)),
/// gradient onehot(y) − softmax(z).
pub fn softmax_ce_grad(z: &Matrix, labels: &[usize]) -> Result<OutputGrads> {
    if labels.len() != z.rows() {
        return Err(Error::Shape {
            context: "softmax_ce_grad",
            detail: format!("{} labels for {} rows", labels.len(), z.rows()),
        });
    }
    let classes = z.cols();
    let mut grad = Matrix::zeros(z.rows(), classes);
    let mut log_prob = 0.0;
    for i in 0..z.rows() {
        let label = labels[i];
        if label >= classes {
            return Err(Error::InvalidLabel { label, classes });
        }
        let row = z.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        log_prob += row[label] - lse;
        let out = grad.row_mut(i);
        for (o, v) in out.iter_mut().zip(row) {
            *o = -((v - max).exp() / sum_exp);
        }
        out[label] += 1.0;
    }
    Ok(OutputGrads { log_prob, grad })
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli head on a single logit column: log p = Σₙ (yₙzₙ − softplus(zₙ)),
/// gradient y − σ(z).
pub fn sigmoid_bce_grad(z: &Matrix, targets: &[f64]) -> Result<OutputGrads> {
    if z.cols() != 1 || targets.len() != z.rows() {
        return Err(Error::Shape {
            context: "sigmoid_bce_grad",
            detail: format!("z {}x{}, {} targets (needs one logit column)", z.rows(), z.cols(), targets.len()),
        });
    }
    let mut grad = Matrix::zeros(z.rows(), 1);
    let mut log_prob = 0.0;
    for i in 0..z.rows() {
        let logit = z.get(i, 0);
        let y = targets[i];
        log_prob += y * logit - softplus(logit);
        grad.set(i, 0, y - sigmoid(logit));
    }
    Ok(OutputGrads { log_prob, grad })
}

/// Training targets in the representation each head consumes: standardized
/// real values for the Gaussian head, class indices for softmax, 0/1 values
/// for the Bernoulli head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
    Binary(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.rows(),
            Targets::Classes(c) => c.len(),
            Targets::Binary(b) => b.len(),
        }
    }
}

/// Routes (z, targets) through the head's log-likelihood and gradient. The
/// Gaussian head needs the noise covariance factor; the others must not
/// receive one.
pub fn head_grads(
    head: LossHead,
    z: &Matrix,
    targets: &Targets,
    sigma_chol: Option<&CholeskyFactor>,
) -> Result<OutputGrads> {
    match (head, targets) {
        (LossHead::Gaussian, Targets::Values(y)) => {
            let chol = sigma_chol.ok_or(Error::InvalidConfig(
                "gaussian head needs a noise covariance factor".into(),
            ))?;
            gaussian_nll_grad(z, y, chol)
        }
        (LossHead::SoftmaxCe, Targets::Classes(labels)) => softmax_ce_grad(z, labels),
        (LossHead::SigmoidBce, Targets::Binary(values)) => sigmoid_bce_grad(z, values),
        _ => Err(Error::InvalidConfig(format!(
            "head {head:?} cannot consume targets {}",
            match targets {
                Targets::Values(_) => "Values",
                Targets::Classes(_) => "Classes",
                Targets::Binary(_) => "Binary",
            }
        ))),
    }
}

/// Softmax probabilities row-wise (stable).
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
