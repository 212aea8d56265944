//! Heterogeneous attention modulation: global attention regulation (GAR) on
//! self-attention, local attention transplantation (LAT) on cross-attention,
//! style-infused noise initialization (SINI), and the teacher traces they
//! read from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;
use std::sync::Mutex;

use crate::attention::{AttentionHook, AttentionProjections, AttentionSiteId, SiteKind};
use crate::error::{Error, Result};
use crate::hamt;
use crate::tensor::{adain, convex_blend, Tensor, DEFAULT_ADAIN_EPSILON};

/// Channel axis of a `tokens × dim` projection matrix.
const PROJECTION_CHANNEL_AXIS: usize = 1;
/// Channel axis of a `channels × h × w` latent.
const LATENT_CHANNEL_AXIS: usize = 0;

pub const DEFAULT_ALPHA: f32 = 0.75;
pub const DEFAULT_BETA: f32 = 0.25;
pub const DEFAULT_GAMMA: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationConfig {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
    pub gar_enabled: bool,
    pub lat_enabled: bool,
    pub sini_enabled: bool,
    /// Inclusive block-index interval receiving GAR/LAT; `None` means all.
    pub layer_range: Option<RangeInclusive<usize>>,
    /// Inclusive inference-step interval receiving GAR/LAT; `None` means all.
    pub step_range: Option<RangeInclusive<usize>>,
    pub adain_epsilon: f32,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            gar_enabled: true,
            lat_enabled: true,
            sini_enabled: true,
            layer_range: None,
            step_range: None,
            adain_epsilon: DEFAULT_ADAIN_EPSILON,
        }
    }
}

impl ModulationConfig {
    /// Every module switched off.
    pub fn disabled() -> Self {
        Self {
            gar_enabled: false,
            lat_enabled: false,
            sini_enabled: false,
            ..Self::default()
        }
    }

    pub fn with_toggles(&self, gar: bool, lat: bool, sini: bool) -> Self {
        Self {
            gar_enabled: gar,
            lat_enabled: lat,
            sini_enabled: sini,
            ..self.clone()
        }
    }

    /// Checks coefficients and that both ranges fit `num_layers` blocks and
    /// `num_steps` inference steps.
    pub fn validate(&self, num_layers: usize, num_steps: usize) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.adain_epsilon > 0.0 && self.adain_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "adain_epsilon must be positive, got {}",
                self.adain_epsilon
            )));
        }
        check_range("layer_range", &self.layer_range, num_layers)?;
        check_range("step_range", &self.step_range, num_steps)
    }

    pub fn modulates_layer(&self, layer: usize) -> bool {
        self.layer_range.as_ref().is_none_or(|r| r.contains(&layer))
    }

    pub fn modulates_step(&self, step: usize) -> bool {
        self.step_range.as_ref().is_none_or(|r| r.contains(&step))
    }
}

fn check_range(name: &str, range: &Option<RangeInclusive<usize>>, bound: usize) -> Result<()> {
    match range {
        Some(r) if r.start() > r.end() || *r.end() >= bound => Err(Error::Config(format!(
            "{name} {}..={} must be non-empty and below {bound}",
            r.start(),
            r.end()
        ))),
        _ => Ok(()),
    }
}

/// AdaIN-maps each of Q, K, V of `content` onto the statistics of the
/// matching `style` projection, per feature column over tokens.
pub fn gar_fuse(
    content: &AttentionProjections,
    style: &AttentionProjections,
    eps: f32,
) -> Result<AttentionProjections> {
    if !content.same_shapes(style) {
        return Err(Error::Shape(format!(
            "gar_fuse: content projections {:?}/{:?}/{:?} vs style {:?}/{:?}/{:?}",
            content.q.shape(),
            content.k.shape(),
            content.v.shape(),
            style.q.shape(),
            style.k.shape(),
            style.v.shape()
        )));
    }
    let fuse = |c: &Tensor, s: &Tensor| adain(c, s, PROJECTION_CHANNEL_AXIS, eps);
    AttentionProjections::new(
        fuse(&content.q, &style.q)?,
        fuse(&content.k, &style.k)?,
        fuse(&content.v, &style.v)?,
    )
}

/// `α · student + (1 − α) · fused` on each of Q, K, V.
pub fn gar_blend(
    student: &AttentionProjections,
    fused: &AttentionProjections,
    alpha: f32,
) -> Result<AttentionProjections> {
    if !student.same_shapes(fused) {
        return Err(Error::Shape("gar_blend: student and fused projections differ in shape".into()));
    }
    AttentionProjections::new(
        convex_blend(&student.q, &fused.q, alpha)?,
        convex_blend(&student.k, &fused.k, alpha)?,
        convex_blend(&student.v, &fused.v, alpha)?,
    )
}

/// Query `β · student_q + (1 − β) · content_q`; keys and values taken from
/// the style teacher.
pub fn lat_transplant(
    student_q: &Tensor,
    content_q: &Tensor,
    style_k: &Tensor,
    style_v: &Tensor,
    beta: f32,
) -> Result<AttentionProjections> {
    student_q.expect_same_shape(content_q, "lat_transplant query")?;
    let q = convex_blend(student_q, content_q, beta)?;
    AttentionProjections::new(q, style_k.clone(), style_v.clone())
}

/// Stylized initial noise: with `A = adain(z_c, z_s)` over latent channels,
/// returns `γ · (z_c − A) + A`.
pub fn sini(z_t_content: &Tensor, z_t_style: &Tensor, gamma: f32, eps: f32) -> Result<Tensor> {
    z_t_content.expect_same_shape(z_t_style, "sini")?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Argument(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(z_t_content.clone());
    }
    let fused = adain(z_t_content, z_t_style, LATENT_CHANNEL_AXIS, eps)?;
    if gamma == 0.0 {
        return Ok(fused);
    }
    let g = gamma as f64;
    z_t_content.zip_map(&fused, |c, a| {
        let a = a as f64;
        (g * (c as f64 - a) + a) as f32
    })
}

/// Projections at every attention site, per inference step, recorded while
/// a teacher replays its trajectory.
pub type StepSites = BTreeMap<AttentionSiteId, AttentionProjections>;

/// Immutable archive of one teacher pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrace {
    z_t: Tensor,
    steps: Vec<StepSites>,
    latents: Option<Vec<Tensor>>,
}

impl TeacherTrace {
    pub fn new(z_t: Tensor, steps: Vec<StepSites>, latents: Option<Vec<Tensor>>) -> Result<Self> {
        if let Some(l) = &latents {
            if let Some(bad) = l.iter().find(|t| t.shape() != z_t.shape()) {
                return Err(Error::Shape(format!(
                    "trace latent {:?} does not match z_T {:?}",
                    bad.shape(),
                    z_t.shape()
                )));
            }
        }
        Ok(Self { z_t, steps, latents })
    }

    /// Initial latent of the teacher trajectory.
    pub fn z_t(&self) -> &Tensor {
        &self.z_t
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, step: usize) -> Option<&StepSites> {
        self.steps.get(step)
    }

    pub fn get(&self, step: usize, site: AttentionSiteId) -> Option<&AttentionProjections> {
        self.steps.get(step)?.get(&site)
    }

    /// Latent after each step, when recorded.
    pub fn latents(&self) -> Option<&[Tensor]> {
        self.latents.as_deref()
    }

    fn require(&self, step: usize, site: AttentionSiteId) -> Result<&AttentionProjections> {
        self.get(step, site).ok_or_else(|| Error::TraceIncomplete {
            step,
            site: site.to_string(),
        })
    }
}

pub const TRACE_MANIFEST: &str = "manifest.txt";

/// Writes `dir/<step>/<layer>/<kind>/{q,k,v}.hamt`, `dir/z_T.hamt`, optional
/// `dir/latents/<step>.hamt` and a manifest of what is covered.
pub fn write_trace(dir: &Path, trace: &TeacherTrace) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    hamt::write(&dir.join("z_T.hamt"), trace.z_t())?;
    let mut manifest = format!("steps = {}\n", trace.num_steps());
    for (step, sites) in trace.steps.iter().enumerate() {
        for (site, p) in sites {
            let site_dir = dir
                .join(step.to_string())
                .join(site.layer.to_string())
                .join(site.kind.as_str());
            for (name, t) in [("q", &p.q), ("k", &p.k), ("v", &p.v)] {
                hamt::write(&site_dir.join(format!("{name}.hamt")), t)?;
            }
            writeln!(manifest, "site = {step} {} {}", site.layer, site.kind.as_str()).unwrap();
        }
    }
    if let Some(latents) = trace.latents() {
        for (step, z) in latents.iter().enumerate() {
            hamt::write(&dir.join("latents").join(format!("{step}.hamt")), z)?;
        }
        writeln!(manifest, "latents = {}", latents.len()).unwrap();
    }
    hamt::write_atomic(&dir.join(TRACE_MANIFEST), manifest.as_bytes())
}

pub fn read_trace(dir: &Path) -> Result<TeacherTrace> {
    let manifest_path = dir.join(TRACE_MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let bad = |line: usize, what: &str| Error::Format {
        path: manifest_path.clone(),
        detail: format!("line {line}: {what}"),
    };
    let mut steps: Option<Vec<StepSites>> = None;
    let mut latents = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let Some((key, value)) = line.split_once(" = ") else {
            return Err(bad(lineno, "expected key = value"));
        };
        match key {
            "steps" => {
                let n: usize = value.parse().map_err(|_| bad(lineno, "bad step count"))?;
                steps = Some(vec![StepSites::new(); n]);
            }
            "site" => {
                let fields: Vec<&str> = value.split(' ').collect();
                let [step, layer, kind] = fields[..] else {
                    return Err(bad(lineno, "site needs step, layer and kind"));
                };
                let step: usize = step.parse().map_err(|_| bad(lineno, "bad step"))?;
                let layer: usize = layer.parse().map_err(|_| bad(lineno, "bad layer"))?;
                let kind = SiteKind::parse(kind).ok_or_else(|| bad(lineno, "bad site kind"))?;
                let slot = steps
                    .as_mut()
                    .and_then(|s| s.get_mut(step))
                    .ok_or_else(|| bad(lineno, "site outside declared steps"))?;
                let site_dir = dir.join(step.to_string()).join(layer.to_string()).join(kind.as_str());
                let load = |name: &str| hamt::read(&site_dir.join(format!("{name}.hamt")));
                let p = AttentionProjections::new(load("q")?, load("k")?, load("v")?)?;
                slot.insert(AttentionSiteId::new(layer, kind), p);
            }
            "latents" => {
                let n: usize = value.parse().map_err(|_| bad(lineno, "bad latent count"))?;
                let l = (0..n)
                    .map(|s| hamt::read(&dir.join("latents").join(format!("{s}.hamt"))))
                    .collect::<Result<Vec<_>>>()?;
                latents = Some(l);
            }
            _ => return Err(bad(lineno, "unknown key")),
        }
    }
    let steps = steps.ok_or_else(|| bad(0, "missing step count"))?;
    TeacherTrace::new(hamt::read(&dir.join("z_T.hamt"))?, steps, latents)
}

/// Records the projections at every site it sees and returns them
/// unchanged.
#[derive(Debug, Default)]
pub struct CaptureHook {
    sites: Mutex<StepSites>,
}

impl CaptureHook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn take(&self) -> StepSites {
        std::mem::take(&mut *self.sites.lock().unwrap_or_else(|e| e.into_inner()))
    }
}

impl AttentionHook for CaptureHook {
    fn modulate(&self, site: AttentionSiteId, p: AttentionProjections) -> Result<AttentionProjections> {
        self.sites
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(site, p.clone());
        Ok(p)
    }
}

/// Student-side modulation over both teacher traces. Use [`StudentHook::at_step`]
/// to obtain the hook for one inference step.
#[derive(Debug, Clone, Copy)]
pub struct StudentHook<'a> {
    content: &'a TeacherTrace,
    style: &'a TeacherTrace,
    cfg: &'a ModulationConfig,
}

pub fn make_student_hook<'a>(
    content: &'a TeacherTrace,
    style: &'a TeacherTrace,
    cfg: &'a ModulationConfig,
) -> StudentHook<'a> {
    StudentHook { content, style, cfg }
}

impl<'a> StudentHook<'a> {
    pub fn at_step(&self, step: usize) -> StepHook<'a> {
        StepHook { inner: *self, step }
    }
}

/// [`StudentHook`] bound to one inference step.
#[derive(Debug, Clone, Copy)]
pub struct StepHook<'a> {
    inner: StudentHook<'a>,
    step: usize,
}

impl AttentionHook for StepHook<'_> {
    fn modulate(&self, site: AttentionSiteId, p: AttentionProjections) -> Result<AttentionProjections> {
        let StudentHook { content, style, cfg } = self.inner;
        let step = self.step;
        if !cfg.modulates_step(step) || !cfg.modulates_layer(site.layer) {
            return Ok(p);
        }
        match site.kind {
            SiteKind::SelfAttention if cfg.gar_enabled => {
                let fused = gar_fuse(
                    content.require(step, site)?,
                    style.require(step, site)?,
                    cfg.adain_epsilon,
                )?;
                gar_blend(&p, &fused, cfg.alpha)
            }
            SiteKind::CrossAttention if cfg.lat_enabled => {
                let c = content.require(step, site)?;
                let s = style.require(step, site)?;
                lat_transplant(&p.q, &c.q, &s.k, &s.v, cfg.beta)
            }
            _ => Ok(p),
        }
    }
}
