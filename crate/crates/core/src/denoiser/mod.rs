//! Small conditional noise-prediction network with interleaved self- and
//! cross-attention, plus its trainer and checkpoint format.

mod checkpoint;
mod config;
mod model;
mod train;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CONFIG_FILE, MANIFEST_FILE};
pub use config::DenoiserConfig;
pub use model::timestep_embedding;
pub use train::{
    loss_and_gradients, training_loss, train, ConstantDataset, LatentSource, ToyDataset,
    TrainOptions, TrainOutcome, TrainingExample,
};
pub use weights::{BlockWeights, DenoiserWeights, Linear, NormParams};

use crate::attention::AttentionHook;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index into the learned condition-embedding table. Id 0 is the null
/// condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Condition(pub usize);

impl Condition {
    pub const NULL: Condition = Condition(0);
}

/// A denoiser with frozen `f32` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    weights: DenoiserWeights<f32>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, weights: DenoiserWeights<f32>) -> Result<Self> {
        config.validate()?;
        let template = DenoiserWeights::<f32>::init(&config, 0);
        let expected = template.params();
        let got = weights.params();
        if expected.len() != got.len() {
            return Err(Error::Config(format!(
                "weights have {} tensors, config expects {}",
                got.len(),
                expected.len()
            )));
        }
        for ((name, e), (_, g)) in expected.iter().zip(&got) {
            if e.dim() != g.dim() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    g.dim(),
                    e.dim()
                )));
            }
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("denoiser weights".into()));
        }
        Ok(Self { config, weights })
    }

    /// Freshly initialized, untrained model.
    pub fn untrained(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: DenoiserWeights::init(&config, seed),
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &DenoiserWeights<f32> {
        &self.weights
    }

    /// `ε_θ(z_t, t, c)`: the noise component predicted for `z_t`.
    pub fn predict_noise(
        &self,
        z_t: &Tensor,
        t: usize,
        c: Condition,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<Tensor> {
        let (out, _) = model::forward(&self.weights, &self.config, z_t, t, c, hook)?;
        model::unpatchify(&out, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::IdentityHook;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            latent_size: 16,
            width: 16,
            num_blocks: 2,
            heads: 2,
            context_dim: 8,
            norm_groups: 4,
            ..DenoiserConfig::default()
        }
    }

    fn random_latent(cfg: &DenoiserConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&cfg.latent_shape(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Model with every parameter randomized, including the zero-initialized
    /// output projection.
    fn randomized(cfg: DenoiserConfig, seed: u64) -> Denoiser {
        let mut w = DenoiserWeights::<f32>::init(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        w.patch_out.w.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        Denoiser::new(cfg, w).unwrap()
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let cfg = small();
        let m = Denoiser::untrained(cfg, 0).unwrap();
        let out = m.predict_noise(&random_latent(&cfg, 1), 500, Condition(2), None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_hook_matches_no_hook_bitwise() {
        let cfg = small();
        let m = randomized(cfg, 3);
        let z = random_latent(&cfg, 4);
        let a = m.predict_noise(&z, 321, Condition(1), None).unwrap();
        let b = m.predict_noise(&z, 321, Condition(1), Some(&IdentityHook)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = small();
        let m = randomized(cfg, 5);
        let z = random_latent(&cfg, 6);
        let a = m.predict_noise(&z, 10, Condition(0), None).unwrap();
        let b = m.predict_noise(&z, 10, Condition(0), None).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn tiny_perturbation_gives_tiny_change() {
        let cfg = small();
        let m = randomized(cfg, 7);
        let z = random_latent(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f32> = (0..z.len()).map(|_| rng.random_range(-1e-6..1e-6)).collect();
        let dz = Tensor::new(z.shape().to_vec(), z.data().iter().zip(&noise).map(|(a, b)| a + b).collect()).unwrap();
        let a = m.predict_noise(&z, 250, Condition(3), None).unwrap();
        let b = m.predict_noise(&dz, 250, Condition(3), None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-2);
    }

    #[test]
    fn wrong_latent_shape_rejected() {
        let m = Denoiser::untrained(small(), 0).unwrap();
        let z = Tensor::zeros(&[3, 8, 8]).unwrap();
        assert!(matches!(m.predict_noise(&z, 0, Condition::NULL, None), Err(Error::Shape(_))));
    }

    #[test]
    fn weights_checked_against_config() {
        let w = DenoiserWeights::<f32>::init(&small(), 0);
        let other = DenoiserConfig { width: 32, ..small() };
        assert!(matches!(Denoiser::new(other, w), Err(Error::Config(_))));
    }
}
