//! Linear-beta noise schedule with deterministic (η = 0) DDIM sampling and
//! inversion.
//!
//! Latents live at integer *positions*: position 0 is the clean latent
//! (ᾱ = 1) and position `p ≥ 1` corresponds to training timestep `p − 1`,
//! so `p = T` is the fully noised end of the chain. An inference trajectory
//! visits `step_indices[i] + 1` for every inference step and ends at 0.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    step_indices: Vec<usize>,
}

/// Schedule parameters fixed at training time and stored with checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self, inference_steps: usize) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end, inference_steps)
    }
}

/// A latent together with its chain position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn new(z: Tensor, t: usize) -> Self {
        Self { z, t }
    }
}

/// Linear betas from `beta_start` to `beta_end` over `timesteps`, with
/// `inference_steps` evenly spaced descending step indices.
pub fn build_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_steps: usize,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Argument("timesteps must be positive".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Argument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alphas_cumprod = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    let step_indices = step_indices(timesteps, inference_steps)?;
    Ok(NoiseSchedule {
        timesteps,
        betas,
        alphas_cumprod,
        step_indices,
    })
}

fn step_indices(timesteps: usize, inference_steps: usize) -> Result<Vec<usize>> {
    if inference_steps == 0 {
        return Err(Error::Argument("inference steps must be at least 1".into()));
    }
    if inference_steps > timesteps {
        return Err(Error::Argument(format!(
            "inference steps ({inference_steps}) exceed timesteps ({timesteps})"
        )));
    }
    let mut idx: Vec<usize> = (0..inference_steps)
        .map(|i| i * timesteps / inference_steps)
        .collect();
    idx.dedup();
    idx.reverse();
    Ok(idx)
}

impl NoiseSchedule {
    /// Schedule from explicit cumulative alphas, mostly for tests and
    /// hand-built scalar cases.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>, inference_steps: usize) -> Result<Self> {
        if alphas_cumprod.is_empty() {
            return Err(Error::Argument("empty alpha schedule".into()));
        }
        if alphas_cumprod.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Argument("alphas_cumprod must lie in (0, 1]".into()));
        }
        if alphas_cumprod.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Argument("alphas_cumprod must be non-increasing".into()));
        }
        let timesteps = alphas_cumprod.len();
        let betas = alphas_cumprod
            .iter()
            .enumerate()
            .map(|(i, &a)| 1.0 - a / if i == 0 { 1.0 } else { alphas_cumprod[i - 1] })
            .collect();
        Ok(Self {
            timesteps,
            betas,
            step_indices: step_indices(timesteps, inference_steps)?,
            alphas_cumprod,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn inference_steps(&self) -> usize {
        self.step_indices.len()
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_indices
    }

    /// ᾱ at a chain position (1 at the clean position 0).
    pub fn alpha_bar(&self, position: usize) -> Result<f64> {
        match position {
            0 => Ok(1.0),
            p if p <= self.timesteps => Ok(self.alphas_cumprod[p - 1]),
            p => Err(Error::Argument(format!(
                "position {p} beyond the schedule's {} timesteps",
                self.timesteps
            ))),
        }
    }

    /// Training timestep fed to the denoiser for a latent at `position`.
    pub fn model_timestep(position: usize) -> Option<usize> {
        position.checked_sub(1)
    }

    /// Positions visited by sampling, noisiest first, ending at 0.
    pub fn trajectory(&self) -> Vec<usize> {
        self.step_indices
            .iter()
            .map(|&i| i + 1)
            .chain(std::iter::once(0))
            .collect()
    }

    /// Deterministic DDIM update towards a less noisy position.
    pub fn ddim_step(&self, state: &LatentState, eps_pred: &Tensor, next_t: usize) -> Result<LatentState> {
        if next_t >= state.t {
            return Err(Error::Ordering {
                current: state.t,
                next: next_t,
                expected: "below",
            });
        }
        self.transport(state, eps_pred, next_t)
    }

    /// Reversed DDIM recurrence towards a noisier position; with the same
    /// `eps_pred` it undoes [`NoiseSchedule::ddim_step`].
    pub fn ddim_invert_step(&self, state: &LatentState, eps_pred: &Tensor, next_t: usize) -> Result<LatentState> {
        if next_t <= state.t {
            return Err(Error::Ordering {
                current: state.t,
                next: next_t,
                expected: "above",
            });
        }
        self.transport(state, eps_pred, next_t)
    }

    /// `z' = √ᾱ' · (z − √(1−ᾱ) ε) / √ᾱ + √(1−ᾱ') ε`
    fn transport(&self, state: &LatentState, eps: &Tensor, next_t: usize) -> Result<LatentState> {
        state.z.expect_same_shape(eps, "ddim update")?;
        let a = self.alpha_bar(state.t)?;
        let a_next = self.alpha_bar(next_t)?;
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let (na, nb) = (a_next.sqrt(), (1.0 - a_next).sqrt());
        let data: Vec<f32> = state
            .z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&z, &e)| {
                let (z, e) = (z as f64, e as f64);
                let x0 = (z - sb * e) / sa;
                (na * x0 + nb * e) as f32
            })
            .collect();
        let z = Tensor::new(state.z.shape().to_vec(), data)?;
        Ok(LatentState { z, t: next_t })
    }

    /// Forward-diffuses a clean latent to training timestep `timestep`.
    pub fn add_noise(&self, clean: &Tensor, noise: &Tensor, timestep: usize) -> Result<Tensor> {
        let a = *self.alphas_cumprod.get(timestep).ok_or_else(|| {
            Error::Argument(format!("timestep {timestep} out of range"))
        })?;
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        clean.zip_map(noise, |x, e| (sa * x as f64 + sb * e as f64) as f32)
    }
}
