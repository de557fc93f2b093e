//! Shared fixtures for the benchmark targets: deterministic random inputs
//! sized like the hidden layers the training loop actually touches.

use bali_core::bali::{init_model, BaliConfig, BaliModel, BetaSchedule, Reparam};
use bali_core::network::{chain_specs, Activation, LossHead, Targets};
use bali_core::tensor::{sample_gaussian, Matrix, RngStream};

/// Well-conditioned random SPD matrix: a scaled Gram matrix plus a ridge.
pub fn random_spd(dim: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 0);
    let g = sample_gaussian(&mut rng, dim, dim);
    let mut a = g.tr_matmul(&g).scale(1.0 / dim as f64);
    for i in 0..dim {
        a.set(i, i, a.get(i, i) + 0.5);
    }
    a
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngStream::new(seed, 1);
    sample_gaussian(&mut rng, rows, cols)
}

/// A regression batch shaped like one augmented hidden layer: `n` rows of
/// `dx`-dimensional inputs and targets from a fixed linear map plus noise.
pub fn layer_shaped_batch(n: usize, dx: usize, dy: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = RngStream::new(seed, 2);
    let x = sample_gaussian(&mut rng, n, dx).scale(1.0 / (dx as f64).sqrt());
    let w = sample_gaussian(&mut rng, dx, dy).scale(0.5);
    let noise = sample_gaussian(&mut rng, n, dy).scale(0.1);
    let y = x.matmul(&w).add(&noise);
    (x, y)
}

/// A trainer plus one full batch of standardized sinc-like data, ready for
/// repeated `train_step` calls.
pub fn training_setup(width: usize, depth: usize, n: usize) -> (BaliModel, Matrix, Targets) {
    let mut rng = RngStream::new(11, 3);
    let x = Matrix::from_fn(n, 1, |_, _| rng.uniform(-1.0, 1.0));
    let y = Matrix::from_fn(n, 1, |i, _| (3.0 * x.get(i, 0)).sin() + 0.1 * rng.standard_normal());
    let hidden = vec![width; depth];
    let specs = chain_specs(1, &hidden, 1, Activation::Tanh);
    let config = BaliConfig {
        alpha: 0.3,
        beta: BetaSchedule::constant(0.2),
        n_eff: n as f64,
        batch_size: n,
        sigma_r_sq: 40.0,
        sigma_u_sq: None,
        dof0: None,
        sigma_init: 1.0,
        reparam: Reparam::Weight,
        total_iters: 1_000_000,
        pred_samples: 64,
    };
    let model = init_model(&specs, LossHead::Gaussian, config, 11).expect("benchmark config is valid");
    (model, x, Targets::Values(y))
}
