//! Noise-prediction training: `‖ε − ε_θ(z_t, t, c)‖²` at uniformly sampled
//! timesteps, optimized with Adam.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::DenoiserConfig;
use super::model::{backward, forward, patchify};
use super::weights::DenoiserWeights;
use super::Condition;
use crate::error::{Error, Result};
use crate::fixtures::{self, ImageClass};
use crate::real::{c, Real};
use crate::scheduler::NoiseSchedule;
use crate::tensor::Tensor;

/// Source of clean training latents in `[-1, 1]`.
pub trait LatentSource {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor, Condition)>;
}

/// Uniform mix of the procedural shape and texture classes.
#[derive(Debug, Clone, Copy)]
pub struct ToyDataset {
    pub channels: usize,
    pub size: usize,
}

impl ToyDataset {
    pub fn for_config(cfg: &DenoiserConfig) -> Self {
        Self {
            channels: cfg.latent_channels,
            size: cfg.latent_size,
        }
    }
}

impl LatentSource for ToyDataset {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor, Condition)> {
        let class = ImageClass::ALL[rng.random_range(0..ImageClass::ALL.len())];
        let image = fixtures::generate(class, self.channels, self.size, rng)?;
        Ok((image, class.condition()))
    }
}

/// Always yields the same latent.
#[derive(Debug, Clone)]
pub struct ConstantDataset {
    pub latent: Tensor,
    pub condition: Condition,
}

impl LatentSource for ConstantDataset {
    fn sample(&mut self, _: &mut ChaCha8Rng) -> Result<(Tensor, Condition)> {
        Ok((self.latent.clone(), self.condition))
    }
}

/// One supervised pair: a noised latent and the noise that produced it.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub noisy: Tensor,
    pub timestep: usize,
    pub condition: Condition,
    pub noise: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of replacing a sample's condition with the null id.
    pub cond_dropout: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            cond_dropout: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: DenoiserWeights<f32>,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
}

/// Mean squared noise-prediction error over a batch.
pub fn training_loss<F: Real>(
    w: &DenoiserWeights<F>,
    cfg: &DenoiserConfig,
    batch: &[TrainingExample],
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let (pred, _) = forward(w, cfg, &ex.noisy, ex.timestep, ex.condition, None)?;
        let target = patchify::<F>(&ex.noise, cfg)?;
        total += (&pred - &target).mapv(|d| d * d).sum().as_f64() / pred.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_gradients<F: Real>(
    w: &DenoiserWeights<F>,
    cfg: &DenoiserConfig,
    batch: &[TrainingExample],
) -> Result<(f64, DenoiserWeights<F>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let mut grads = w.zeros_like();
    let mut total = 0.0;
    for ex in batch {
        let (pred, cache) = forward(w, cfg, &ex.noisy, ex.timestep, ex.condition, None)?;
        let target = patchify::<F>(&ex.noise, cfg)?;
        let diff = &pred - &target;
        let n = pred.len() as f64;
        total += diff.mapv(|d| d * d).sum().as_f64() / n;
        let d_out = diff * c::<F>(2.0 / (n * batch.len() as f64));
        backward(w, cfg, &cache, &d_out, &mut grads);
    }
    Ok((total / batch.len() as f64, grads))
}

struct Adam {
    m: DenoiserWeights<f32>,
    v: DenoiserWeights<f32>,
    step: i32,
    lr: f32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(like: &DenoiserWeights<f32>, lr: f64) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            lr: lr as f32,
        }
    }

    fn update(&mut self, w: &mut DenoiserWeights<f32>, grads: &DenoiserWeights<f32>) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        let lr = self.lr;
        let params = w.params_mut().into_iter();
        let moments = self.m.params_mut().into_iter().zip(self.v.params_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.zip(grads.params()).zip(moments) {
            adam_update(p, g, m, v, lr, bc1, bc2);
        }
    }
}

fn adam_update(
    p: &mut Array2<f32>,
    g: &Array2<f32>,
    m: &mut Array2<f32>,
    v: &mut Array2<f32>,
    lr: f32,
    bc1: f32,
    bc2: f32,
) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = Adam::BETA1 * *m + (1.0 - Adam::BETA1) * g;
        *v = Adam::BETA2 * *v + (1.0 - Adam::BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + Adam::EPS);
    });
}

fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Trains a freshly initialized denoiser. Single-threaded and fully
/// determined by `opts.seed`.
pub fn train(
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    data: &mut dyn LatentSource,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.steps == 0 {
        return Err(Error::Argument("training needs at least one step".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be positive, got {}", opts.lr)));
    }
    if !(0.0..=1.0).contains(&opts.cond_dropout) {
        return Err(Error::Argument("cond_dropout must lie in [0, 1]".into()));
    }
    let mut weights = DenoiserWeights::<f32>::init(cfg, opts.seed);
    let mut adam = Adam::new(&weights, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7EA1_0000);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            let (clean, mut condition) = data.sample(&mut rng)?;
            if clean.shape() != cfg.latent_shape() {
                return Err(Error::Shape(format!(
                    "dataset latent {:?} does not match model {:?}",
                    clean.shape(),
                    cfg.latent_shape()
                )));
            }
            if rng.random_bool(opts.cond_dropout) {
                condition = Condition::NULL;
            }
            let timestep = rng.random_range(0..schedule.timesteps());
            let noise = gaussian(clean.shape(), &mut rng)?;
            let noisy = schedule.add_noise(&clean, &noise, timestep)?;
            batch.push(TrainingExample {
                noisy,
                timestep,
                condition,
                noise,
            });
        }
        let (loss, grads) = loss_and_gradients(&weights, cfg, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        adam.update(&mut weights, &grads);
        if !weights.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
    }
    Ok(TrainOutcome { weights, losses })
}
