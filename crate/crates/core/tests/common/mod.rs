#![allow(dead_code)]

use ham_core::denoiser::{
    loss_and_gradients, train, training_loss, Condition, Denoiser, DenoiserConfig, DenoiserWeights,
    ToyDataset, TrainOptions, TrainingExample,
};
use ham_core::scheduler::{NoiseSchedule, ScheduleParams};
use ham_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Miniature width-8 config used for finite-difference checks.
pub fn width8_config() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 3,
        latent_size: 8,
        width: 8,
        num_blocks: 2,
        heads: 2,
        context_tokens: 2,
        context_dim: 4,
        patch_size: 2,
        norm_groups: 2,
        num_conditions: 5,
    }
}

/// Small full-resolution config trained by the end-to-end checks.
pub fn e2e_config() -> DenoiserConfig {
    DenoiserConfig {
        width: 32,
        num_blocks: 2,
        context_dim: 32,
        norm_groups: 4,
        ..DenoiserConfig::default()
    }
}

pub const E2E_TRAIN_STEPS: usize = 300;

pub fn e2e_schedule() -> NoiseSchedule {
    ScheduleParams::default().build(50).unwrap()
}

pub fn train_e2e_model(seed: u64) -> Denoiser {
    let cfg = e2e_config();
    let opts = TrainOptions { steps: E2E_TRAIN_STEPS, seed, ..TrainOptions::default() };
    let out = train(&cfg, &e2e_schedule(), &mut ToyDataset::for_config(&cfg), &opts).unwrap();
    Denoiser::new(cfg, out.weights).unwrap()
}

/// Means of the first and last tenth of a loss curve.
pub fn loss_trend(losses: &[f64]) -> (f64, f64) {
    let n = (losses.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..n]), mean(&losses[losses.len() - n..]))
}

pub struct GradCheck {
    pub name: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backprop gradients with central differences (step `h`) on one
/// random entry of every parameter tensor, in f64.
pub fn gradient_check(seed: u64, h: f64) -> Vec<GradCheck> {
    let cfg = width8_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DenoiserWeights::<f64>::init(&cfg, seed);
    // zero-initialized output projection would block every upstream gradient
    w.patch_out.w.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    w.patch_out.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    let schedule = ScheduleParams::default().build(10).unwrap();
    let batch: Vec<TrainingExample> = (0..2)
        .map(|i| {
            let shape = cfg.latent_shape();
            let clean = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)).unwrap();
            let noise = Tensor::from_fn(&shape, |_| rng.random_range(-1.5..1.5)).unwrap();
            let timestep = rng.random_range(0..schedule.timesteps());
            TrainingExample {
                noisy: schedule.add_noise(&clean, &noise, timestep).unwrap(),
                timestep,
                condition: Condition(i + 1),
                noise,
            }
        })
        .collect();
    let (_, grads) = loss_and_gradients(&w, &cfg, &batch).unwrap();
    let grads = grads.params().into_iter().map(|(_, g)| g.clone()).collect::<Vec<_>>();
    let names: Vec<String> = w.params().into_iter().map(|(n, _)| n).collect();
    let mut checks = Vec::new();
    for (p, name) in names.iter().enumerate() {
        let (rows, cols) = grads[p].dim();
        let index = (rng.random_range(0..rows), rng.random_range(0..cols));
        let eval = |delta: f64| {
            let mut shifted = w.clone();
            shifted.params_mut()[p].1[index] += delta;
            training_loss(&shifted, &cfg, &batch).unwrap()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = grads[p][index];
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        checks.push(GradCheck {
            name: name.clone(),
            index,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / scale,
        });
    }
    checks
}
