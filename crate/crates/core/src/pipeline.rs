//! End-to-end style transfer: invert the content and style sources into
//! teacher traces, initialize the student with stylized noise, and denoise
//! it under the modulation hook.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::AttentionHook;
use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::modulation::{make_student_hook, sini, CaptureHook, ModulationConfig, StepSites, StudentHook, TeacherTrace};
use crate::scheduler::{LatentState, NoiseSchedule};
use crate::tensor::Tensor;

/// Toggle rows `(label, gar, lat, sini)` of the module ablation, in table
/// order.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 8] = [
    ("A", false, false, false),
    ("B", true, false, false),
    ("C", false, true, false),
    ("D", false, false, true),
    ("E", true, true, false),
    ("F", true, false, true),
    ("G", false, true, true),
    ("H", true, true, true),
];

fn check_schedule(schedule: &NoiseSchedule) -> Result<()> {
    if schedule.inference_steps() == 0 {
        return Err(Error::Argument("schedule has no inference steps".into()));
    }
    Ok(())
}

fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(detail) => Error::Numeric { step, detail },
        other => other,
    })
}

/// Deterministic DDIM inversion from a clean latent to `z_T`.
pub fn invert(model: &Denoiser, schedule: &NoiseSchedule, latent: &Tensor, condition: Condition) -> Result<Tensor> {
    check_schedule(schedule)?;
    let trajectory = schedule.trajectory();
    let n = schedule.inference_steps();
    let mut state = LatentState::new(latent.clone(), 0);
    // step ordinal k moves trajectory[k + 1] -> trajectory[k]
    for k in (0..n).rev() {
        let next = trajectory[k];
        let t = NoiseSchedule::model_timestep(next).expect("noisy positions are >= 1");
        let eps = at_step(k, model.predict_noise(&state.z, t, condition, None))?;
        state = at_step(k, schedule.ddim_invert_step(&state, &eps, next))?;
    }
    Ok(state.z)
}

/// Output of one denoising pass.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Clean latent reached at the end of the pass (unclamped).
    pub output: Tensor,
    /// Latent after every step; the last entry equals `output`.
    pub latents: Vec<Tensor>,
    /// Projections per step, when captured.
    pub sites: Option<Vec<StepSites>>,
}

enum Hooks<'a> {
    None,
    Capture,
    Student(StudentHook<'a>),
}

fn denoise(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    condition: Condition,
    hooks: Hooks<'_>,
) -> Result<Trajectory> {
    check_schedule(schedule)?;
    let trajectory = schedule.trajectory();
    let mut state = LatentState::new(z_t.clone(), trajectory[0]);
    let mut latents = Vec::with_capacity(schedule.inference_steps());
    let mut sites = Vec::new();
    for k in 0..schedule.inference_steps() {
        let t = NoiseSchedule::model_timestep(trajectory[k]).expect("noisy positions are >= 1");
        let eps = match &hooks {
            Hooks::None => model.predict_noise(&state.z, t, condition, None),
            Hooks::Capture => {
                let capture = CaptureHook::new();
                let eps = model.predict_noise(&state.z, t, condition, Some(&capture as &dyn AttentionHook));
                sites.push(capture.take());
                eps
            }
            Hooks::Student(h) => model.predict_noise(&state.z, t, condition, Some(&h.at_step(k))),
        };
        let eps = at_step(k, eps)?;
        state = at_step(k, schedule.ddim_step(&state, &eps, trajectory[k + 1]))?;
        latents.push(state.z.clone());
    }
    Ok(Trajectory {
        output: state.z,
        latents,
        sites: matches!(hooks, Hooks::Capture).then_some(sites),
    })
}

/// Plain, unmodulated sampling from `z_t`.
pub fn sample(model: &Denoiser, schedule: &NoiseSchedule, z_t: &Tensor, condition: Condition) -> Result<Trajectory> {
    denoise(model, schedule, z_t, condition, Hooks::None)
}

/// Unmodulated sampling from `z_t` recording every attention site.
pub fn replay_teacher(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    condition: Condition,
) -> Result<TeacherTrace> {
    let run = denoise(model, schedule, z_t, condition, Hooks::Capture)?;
    TeacherTrace::new(z_t.clone(), run.sites.unwrap_or_default(), Some(run.latents))
}

/// Inverts `latent` and replays the reconstruction as a teacher.
pub fn invert_image(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    latent: &Tensor,
    condition: Condition,
) -> Result<(Tensor, TeacherTrace)> {
    let z_t = invert(model, schedule, latent, condition)?;
    let trace = replay_teacher(model, schedule, &z_t, condition)?;
    Ok((z_t, trace))
}

/// Invert then sample back without modulation.
pub fn reconstruct(model: &Denoiser, schedule: &NoiseSchedule, latent: &Tensor, condition: Condition) -> Result<Tensor> {
    let z_t = invert(model, schedule, latent, condition)?;
    Ok(clamp_display(&sample(model, schedule, &z_t, condition)?.output))
}

/// Clamps a latent to the displayable range `[-1, 1]`.
pub fn clamp_display(z: &Tensor) -> Tensor {
    z.map(|v| v.clamp(-1.0, 1.0)).expect("clamping keeps values finite")
}

#[derive(Debug, Clone)]
pub enum StyleSource {
    /// Style image latent, inverted under the null condition.
    Image(Tensor),
    /// Style generated from noise under a condition id.
    Condition(Condition),
}

#[derive(Debug, Clone, Copy)]
pub struct TransferRequest<'a> {
    pub model: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub content: &'a Tensor,
    pub style: &'a StyleSource,
    pub modulation: &'a ModulationConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Teachers {
    pub content: Arc<TeacherTrace>,
    pub style: Arc<TeacherTrace>,
    /// Condition the style teacher and the student run under.
    pub style_condition: Condition,
}

impl Teachers {
    /// Clean latent reconstructed by the style teacher.
    pub fn style_reconstruction(&self) -> Tensor {
        clamp_display(last_latent(&self.style))
    }

    /// Clean latent reconstructed by the content teacher.
    pub fn content_reconstruction(&self) -> Tensor {
        clamp_display(last_latent(&self.content))
    }
}

fn last_latent(trace: &TeacherTrace) -> &Tensor {
    trace
        .latents()
        .and_then(|l| l.last())
        .expect("teacher traces record latents")
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    /// Student output clamped to `[-1, 1]`.
    pub stylized: Tensor,
    pub z_t_content: Tensor,
    pub z_t_style: Tensor,
    pub z_t_main: Tensor,
    pub teachers: Teachers,
    /// Student latent after every step.
    pub latents: Vec<Tensor>,
}

fn validate(req: &TransferRequest<'_>) -> Result<()> {
    check_schedule(req.schedule)?;
    let cfg = req.model.config();
    req.modulation.validate(cfg.num_blocks, req.schedule.inference_steps())?;
    let shape = cfg.latent_shape();
    if req.content.shape() != shape {
        return Err(Error::Shape(format!(
            "content latent {:?} does not match model {shape:?}",
            req.content.shape()
        )));
    }
    match req.style {
        StyleSource::Image(t) if t.shape() != shape => Err(Error::Shape(format!(
            "style latent {:?} does not match model {shape:?}",
            t.shape()
        ))),
        StyleSource::Condition(c) if c.0 == 0 || c.0 >= cfg.num_conditions => Err(Error::Argument(format!(
            "style condition {} is not a style id (1..{})",
            c.0, cfg.num_conditions
        ))),
        _ => Ok(()),
    }
}

/// Builds both teacher traces; the two passes run concurrently.
pub fn build_teachers(req: &TransferRequest<'_>) -> Result<Teachers> {
    validate(req)?;
    let (model, schedule) = (req.model, req.schedule);
    let style_condition = match req.style {
        StyleSource::Image(_) => Condition::NULL,
        StyleSource::Condition(c) => *c,
    };
    let (content, style) = thread::scope(|s| {
        let content = s.spawn(|| invert_image(model, schedule, req.content, Condition::NULL));
        let style = match req.style {
            StyleSource::Image(latent) => invert_image(model, schedule, latent, Condition::NULL),
            StyleSource::Condition(c) => {
                let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
                let shape = model.config().latent_shape();
                Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng)).and_then(|z_s| {
                    replay_teacher(model, schedule, &z_s, *c).map(|trace| (z_s, trace))
                })
            }
        };
        let content = content.join().expect("content teacher thread panicked");
        (content, style)
    });
    let (_, content) = content?;
    let (_, style) = style?;
    Ok(Teachers {
        content: Arc::new(content),
        style: Arc::new(style),
        style_condition,
    })
}

/// Runs the modulated student against precomputed teachers.
pub fn run_student(req: &TransferRequest<'_>, teachers: &Teachers, modulation: &ModulationConfig) -> Result<TransferResult> {
    modulation.validate(req.model.config().num_blocks, req.schedule.inference_steps())?;
    let z_c = teachers.content.z_t();
    let z_s = teachers.style.z_t();
    let z_m = if modulation.sini_enabled {
        sini(z_c, z_s, modulation.gamma, modulation.adain_epsilon)?
    } else {
        z_c.clone()
    };
    let hook = make_student_hook(&teachers.content, &teachers.style, modulation);
    let run = denoise(req.model, req.schedule, &z_m, teachers.style_condition, Hooks::Student(hook))?;
    Ok(TransferResult {
        stylized: clamp_display(&run.output),
        z_t_content: z_c.clone(),
        z_t_style: z_s.clone(),
        z_t_main: z_m,
        teachers: teachers.clone(),
        latents: run.latents,
    })
}

pub fn transfer(req: &TransferRequest<'_>) -> Result<TransferResult> {
    let teachers = build_teachers(req)?;
    run_student(req, &teachers, req.modulation)
}

/// One result per `(gar, lat, sini)` row, all sharing one pair of teachers.
pub fn ablation_matrix(req: &TransferRequest<'_>, toggles: &[(bool, bool, bool)]) -> Result<Vec<TransferResult>> {
    let teachers = build_teachers(req)?;
    let mut done: BTreeMap<(bool, bool, bool), TransferResult> = BTreeMap::new();
    let mut out = Vec::with_capacity(toggles.len());
    for &row in toggles {
        if let std::collections::btree_map::Entry::Vacant(e) = done.entry(row) {
            let cfg = req.modulation.with_toggles(row.0, row.1, row.2);
            e.insert(run_student(req, &teachers, &cfg)?);
        }
        out.push(done[&row].clone());
    }
    Ok(out)
}
