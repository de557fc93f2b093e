//! Built-in verification suites behind the CLI `check` command. Each suite
//! exercises an algebraic identity of the training machinery against an
//! independently computed reference and reports the worst deviation seen.

use std::fmt;

use crate::bali::{init_model, mean_recursion_check, BaliConfig, BetaSchedule, Reparam};
use crate::conjugate::{glm_posterior, mniw_posterior, mvblr_posterior, MatrixNormal, Mniw};
use crate::error::Result;
use crate::harness::data::gen_sinc;
use crate::network::{
    backward_output_grads, chain_specs, forward, forward_from, head_grads, Activation, LayerSpec,
    LossHead, NetworkWeights, Targets,
};
use crate::tensor::{
    cholesky, kron, sample_gaussian, spd_inverse, unvec, vec_cols, CholeskyFactor, Matrix, RngStream,
};

/// Outcome of one named identity check.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, instances: usize, max_deviation: f64, threshold: f64) -> CheckReport {
        CheckReport {
            name: name.into(),
            instances,
            max_deviation,
            threshold,
            passed: max_deviation <= threshold,
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} over {} instances, max deviation {:.3e} (threshold {:.1e})",
            if self.passed { "ok" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_deviation,
            self.threshold,
        )
    }
}

fn small_dim(rng: &mut RngStream, max: usize) -> usize {
    1 + (rng.uniform(0.0, max as f64) as usize).min(max - 1)
}

/// Random well-conditioned SPD matrix: GᵀG/d shifted by 0.5·I.
fn random_spd(dim: usize, rng: &mut RngStream) -> Matrix {
    let g = sample_gaussian(rng, dim, dim);
    g.tr_matmul(&g)
        .scale(1.0 / dim as f64)
        .add(&Matrix::scaled_identity(dim, 0.5))
}

/// Kronecker-product identities on random matrices with sides up to 4:
/// distributivity, associativity, transpose, the mixed product, the
/// inverse of an SPD product, and the vec identity vec(AXB) = (Bᵀ⊗A)vec(X).
pub fn kron_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = RngStream::new(seed, 0);
    let mut dev = [0.0_f64; 6];
    for _ in 0..instances {
        let (p, q) = (small_dim(&mut rng, 4), small_dim(&mut rng, 4));
        let (r, s) = (small_dim(&mut rng, 4), small_dim(&mut rng, 4));
        let (t, u) = (small_dim(&mut rng, 4), small_dim(&mut rng, 4));
        let a = sample_gaussian(&mut rng, p, q);
        let b = sample_gaussian(&mut rng, p, q);
        let c = sample_gaussian(&mut rng, r, s);
        let d = sample_gaussian(&mut rng, t, u);

        dev[0] = dev[0].max(kron(&a.add(&b), &c).max_abs_diff(&kron(&a, &c).add(&kron(&b, &c))));
        dev[1] = dev[1].max(kron(&kron(&a, &c), &d).max_abs_diff(&kron(&a, &kron(&c, &d))));
        dev[2] = dev[2].max(
            kron(&a, &c)
                .transpose()
                .max_abs_diff(&kron(&a.transpose(), &c.transpose())),
        );

        // Mixed product needs inner dimensions to agree: A(p×q)C2(q×t) and
        // B=c(r×s)D2(s×u).
        let c2 = sample_gaussian(&mut rng, q, t);
        let d2 = sample_gaussian(&mut rng, s, u);
        let lhs = kron(&a, &c).matmul(&kron(&c2, &d2));
        let rhs = kron(&a.matmul(&c2), &c.matmul(&d2));
        dev[3] = dev[3].max(lhs.max_abs_diff(&rhs));

        let sa = random_spd(p, &mut rng);
        let sb = random_spd(r, &mut rng);
        let inv_of_kron = spd_inverse(&kron(&sa, &sb))?;
        let kron_of_inv = kron(&spd_inverse(&sa)?, &spd_inverse(&sb)?);
        let scale = kron_of_inv.max_abs().max(1.0);
        dev[4] = dev[4].max(inv_of_kron.max_abs_diff(&kron_of_inv) / scale);

        let xm = sample_gaussian(&mut rng, q, r);
        let bm = sample_gaussian(&mut rng, r, s);
        let direct = vec_cols(&a.matmul(&xm).matmul(&bm));
        let lifted = kron(&bm.transpose(), &a).matvec(&vec_cols(&xm));
        let vec_dev = direct
            .iter()
            .zip(&lifted)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0_f64, f64::max);
        dev[5] = dev[5].max(vec_dev);
    }
    let names = [
        "kron_distributes_over_addition",
        "kron_is_associative",
        "kron_commutes_with_transpose",
        "kron_mixed_product",
        "kron_inverse_of_spd_product",
        "kron_vec_identity",
    ];
    Ok(names
        .iter()
        .zip(dev)
        .map(|(name, d)| CheckReport::new(name, instances, d, 1e-10))
        .collect())
}

/// Matrix-variate posterior updates against two independent references: the
/// same model flattened to one long regression through Kronecker lifting,
/// and the update rewritten in natural parameters and inverted back.
pub fn posterior_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = RngStream::new(seed, 0);
    let mut dev_flat = 0.0_f64;
    let mut dev_nat = 0.0_f64;
    let mut dev_dof = 0.0_f64;
    for _ in 0..instances {
        let dx = small_dim(&mut rng, 4);
        let dy = small_dim(&mut rng, 3);
        let n = small_dim(&mut rng, 8);
        let x = sample_gaussian(&mut rng, n, dx);
        let y = sample_gaussian(&mut rng, n, dy);
        let m0 = sample_gaussian(&mut rng, dx, dy);
        let r0 = random_spd(dx, &mut rng);
        let sigma = random_spd(dy, &mut rng);

        // Reference 1: stack the columns of Y into one vector and solve the
        // equivalent single-output regression. The matrix-variate posterior
        // must match entrywise: vec mean, and covariance Σ ⊗ R.
        let post = mvblr_posterior(&x, &y, &MatrixNormal::new(m0.clone(), r0.clone(), sigma.clone())?, &sigma)?;
        let design = kron(&Matrix::identity(dy), &x);
        let flat = glm_posterior(
            &design,
            &vec_cols(&y),
            &vec_cols(&m0),
            &kron(&sigma, &r0),
            &kron(&sigma, &Matrix::identity(n)),
        )?;
        let mean_flat = unvec(flat.mean(), dx, dy)?;
        dev_flat = dev_flat.max(post.mean().max_abs_diff(&mean_flat));
        dev_flat = dev_flat.max(kron(&sigma, post.row_scale()).max_abs_diff(flat.cov()));

        // Reference 2: natural parameters. Integer-valued degrees of freedom
        // keep every sum exact, so the recovered count must match bitwise.
        let dof0 = dy as f64 + 2.0;
        let u0 = random_spd(dy, &mut rng);
        let direct = mniw_posterior(&x, &y, &Mniw::new(m0.clone(), r0.clone(), u0.clone(), dof0)?)?;

        let r0_inv = spd_inverse(&r0)?;
        let theta1 = r0_inv.add(&x.tr_matmul(&x)).scale(-0.5);
        let theta2 = r0_inv.matmul(&m0).add(&x.tr_matmul(&y));
        let theta3 = u0
            .add(&m0.tr_matmul(&r0_inv.matmul(&m0)))
            .add(&y.tr_matmul(&y))
            .scale(-0.5);
        let theta4 = -0.5 * (n as f64 + dof0 + dy as f64 + dx as f64 + 1.0);

        let prec = theta1.scale(-2.0).symmetrized();
        let prec_chol = cholesky(&prec, 0.0)?;
        let mean_nat = prec_chol.solve_mat(&theta2);
        let r_nat = prec_chol.inverse();
        let half = prec_chol.tr_mul_mat(&mean_nat);
        let u_nat = theta3.scale(-2.0).sub(&half.tr_matmul(&half));
        let dof_nat = -2.0 * theta4 - (dy as f64 + dx as f64 + 1.0);

        dev_nat = dev_nat.max(direct.mean().max_abs_diff(&mean_nat));
        dev_nat = dev_nat.max(direct.row_scale().max_abs_diff(&r_nat));
        dev_nat = dev_nat.max(direct.u_scale().max_abs_diff(&u_nat));
        dev_dof = dev_dof.max((dof_nat - direct.dof()).abs());
    }
    Ok(vec![
        CheckReport::new("posterior_matches_flattened_regression", instances, dev_flat, 1e-8),
        CheckReport::new("posterior_natural_parameter_roundtrip", instances, dev_nat, 1e-8),
        CheckReport::new("posterior_dof_recovered_exactly", instances, dev_dof, 0.0),
    ])
}

struct GradientProbe {
    specs: Vec<LayerSpec>,
    weights: NetworkWeights,
    head: LossHead,
    targets: Targets,
    sigma_chol: Option<CholeskyFactor>,
    x: Matrix,
}

fn random_probe(index: usize, rng: &mut RngStream) -> Result<GradientProbe> {
    let head = match index % 3 {
        0 => LossHead::Gaussian,
        1 => LossHead::SoftmaxCe,
        _ => LossHead::SigmoidBce,
    };
    let activation = match (index / 3) % 3 {
        0 => Activation::Tanh,
        1 => Activation::LeakyTanh,
        _ => Activation::Relu,
    };
    let depth = small_dim(rng, 3);
    let hidden: Vec<usize> = (0..depth - 1).map(|_| small_dim(rng, 8)).collect();
    let in_dim = small_dim(rng, 8);
    let out_dim = match head {
        LossHead::Gaussian => small_dim(rng, 3),
        LossHead::SoftmaxCe => 1 + small_dim(rng, 3),
        LossHead::SigmoidBce => 1,
    };
    let batch = small_dim(rng, 4);
    let specs = chain_specs(in_dim, &hidden, out_dim, activation);
    let mats = specs.iter().map(|s| sample_gaussian(rng, s.weight_rows(), s.out_dim).scale(0.8)).collect();
    let weights = NetworkWeights::new(&specs, mats)?;
    let x = sample_gaussian(rng, batch, in_dim);
    let (targets, sigma_chol) = match head {
        LossHead::Gaussian => {
            let y = sample_gaussian(rng, batch, out_dim);
            let sigma = random_spd(out_dim, rng);
            (Targets::Values(y), Some(cholesky(&sigma, 0.0)?))
        }
        LossHead::SoftmaxCe => {
            let labels = (0..batch).map(|_| rng.uniform(0.0, out_dim as f64) as usize).collect();
            (Targets::Classes(labels), None)
        }
        LossHead::SigmoidBce => {
            let bits = (0..batch).map(|_| f64::from(rng.uniform(0.0, 1.0) < 0.5)).collect();
            (Targets::Binary(bits), None)
        }
    };
    Ok(GradientProbe { specs, weights, head, targets, sigma_chol, x })
}

/// Back-propagated pre-activation gradients against central finite
/// differences of the batch log-likelihood, across random networks of up to
/// three layers and all three heads. The deviation is |fd − analytic|
/// divided by max(|analytic|, |fd|, 0.01), so the 1e-5 threshold doubles as
/// an absolute floor of 1e-7 on near-zero gradients.
pub fn gradient_suite(nets: usize, seed: u64) -> Result<Vec<CheckReport>> {
    const EPS: f64 = 1e-5;
    let mut rng = RngStream::new(seed, 0);
    let mut worst = 0.0_f64;
    let mut checked = 0usize;
    for index in 0..nets {
        let probe = random_probe(index, &mut rng)?;
        let trace = forward(&probe.specs, &probe.weights, &probe.x)?;
        // A rectifier kink inside the finite-difference interval would make
        // the two-sided estimate meaningless, so such draws are skipped.
        let has_kink = probe.specs.iter().any(|s| s.activation == Activation::Relu)
            && trace.preacts[..trace.preacts.len() - 1]
                .iter()
                .any(|z| z.data().iter().any(|v| v.abs() < 1e-4));
        if has_kink {
            continue;
        }
        checked += 1;
        let out = head_grads(probe.head, trace.output(), &probe.targets, probe.sigma_chol.as_ref())?;
        let grads = backward_output_grads(&probe.specs, &probe.weights, &trace, &out.grad)?;
        for l in 0..probe.specs.len() {
            let z = &trace.preacts[l];
            for i in 0..z.rows() {
                for j in 0..z.cols() {
                    let log_prob_at = |offset: f64| -> Result<f64> {
                        let mut zp = z.clone();
                        zp.set(i, j, z.get(i, j) + offset);
                        let output = forward_from(&probe.specs, &probe.weights, l, &zp)?;
                        Ok(head_grads(probe.head, &output, &probe.targets, probe.sigma_chol.as_ref())?.log_prob)
                    };
                    let fd = (log_prob_at(EPS)? - log_prob_at(-EPS)?) / (2.0 * EPS);
                    let an = grads[l].get(i, j);
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(0.01);
                    worst = worst.max(rel);
                }
            }
        }
    }
    Ok(vec![CheckReport::new("gradient_finite_difference", checked, worst, 1e-5)])
}

/// One-step posterior mean refresh against the closed-form recursion that
/// folds each batch into the previous mean, replayed over a recorded
/// training history on noisy sinc data.
pub fn recursion_suite(steps: u64, seed: u64) -> Result<Vec<CheckReport>> {
    let data = gen_sinc(64, 0.1, &mut RngStream::new(seed, 0))?;
    let specs = chain_specs(1, &[16], 1, Activation::Tanh);
    let config = BaliConfig {
        alpha: 0.3,
        beta: BetaSchedule::constant(0.2),
        n_eff: 64.0,
        batch_size: 16,
        sigma_r_sq: 40.0,
        sigma_u_sq: None,
        dof0: None,
        sigma_init: 1.0,
        reparam: Reparam::Weight,
        total_iters: steps,
        pred_samples: 8,
    };
    let mut model = init_model(&specs, LossHead::Gaussian, config, seed)?;
    model.enable_recording();
    let Targets::Values(targets) = data.targets() else {
        unreachable!("sinc data is real-valued");
    };
    for step in 0..steps {
        let lo = (step as usize * 16) % 64;
        let bx = Matrix::from_fn(16, 1, |i, _| data.x().get(lo + i, 0));
        let by = Matrix::from_fn(16, 1, |i, _| targets.get(lo + i, 0));
        model.train_step(&bx, &Targets::Values(by))?;
    }
    let history = model.take_history();
    let mut worst = 0.0_f64;
    let mut records = 0usize;
    for (l, layer_steps) in history.iter().enumerate() {
        records += layer_steps.len();
        let prior = model.layer_prior(l);
        let row_prec0 = spd_inverse(prior.row_scale())?;
        worst = worst.max(mean_recursion_check(prior.mean(), &row_prec0, layer_steps)?);
    }
    Ok(vec![CheckReport::new("posterior_mean_recursion", records, worst, 1e-6)])
}
