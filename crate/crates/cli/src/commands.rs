use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ham_core::denoiser::{
    load_checkpoint, save_checkpoint, train as train_model, Checkpoint, Condition, Denoiser, ToyDataset,
};
use ham_core::fixtures::{fixture_pair, ImageClass};
use ham_core::hamt::{self, write_atomic};
use ham_core::image_io::{load_png, save_png};
use ham_core::metrics::{
    cc_score, channel_stat_distance, dc_score, matches_reported, read_scores_csv, write_report, TABLE1_CSV,
    TABLE1_REPORTED,
};
use ham_core::modulation::write_trace;
use ham_core::pipeline::{
    ablation_matrix, invert_image, reconstruct as reconstruct_latent, transfer as run_transfer, StyleSource,
    TransferRequest, ABLATION_ROWS,
};
use ham_core::scheduler::NoiseSchedule;

use crate::config::{RunConfig, MODEL_KEYS};
use crate::{CliError, StyleArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model_cfg = cfg.denoiser()?;
    let params = cfg.schedule()?;
    let opts = cfg.train_options()?;
    let schedule = params.build(cfg.inference_steps()?)?;
    eprintln!("training {} steps, seed {}", opts.steps, opts.seed);
    let outcome = train_model(&model_cfg, &schedule, &mut ToyDataset::for_config(&model_cfg), &opts)?;
    let log_every = (opts.steps / 10).max(1);
    let mut csv = String::from("step,loss\n");
    for (step, loss) in outcome.losses.iter().enumerate() {
        writeln!(csv, "{step},{loss}").unwrap();
        if step % log_every == 0 || step + 1 == opts.steps {
            eprintln!("step {step} loss {loss:.5}");
        }
    }
    let ckpt = Checkpoint {
        denoiser: Denoiser::new(model_cfg, outcome.weights)?,
        schedule: params,
    };
    save_checkpoint(out, &ckpt)?;
    write_atomic(&out.join("loss.csv"), csv.as_bytes())?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Loads a checkpoint and checks it against explicitly configured model
/// and schedule keys.
fn load_model(cfg: &RunConfig, dir: &Path) -> Result<(Denoiser, NoiseSchedule)> {
    let steps = cfg.inference_steps()?;
    let ckpt = load_checkpoint(dir)?;
    let stored = ckpt.denoiser.config();
    let requested = cfg.denoiser()?;
    for ((key, have), (_, want)) in stored.entries().into_iter().zip(requested.entries()) {
        debug_assert!(MODEL_KEYS.contains(&key));
        if cfg.is_explicit(key) && have != want {
            return Err(ham_core::Error::Config(format!(
                "checkpoint has {key} = {have}, configuration asks for {want}"
            ))
            .into());
        }
    }
    let params = cfg.schedule()?;
    for (key, differs) in [
        ("timesteps", params.timesteps != ckpt.schedule.timesteps),
        ("beta_start", params.beta_start != ckpt.schedule.beta_start),
        ("beta_end", params.beta_end != ckpt.schedule.beta_end),
    ] {
        if cfg.is_explicit(key) && differs {
            return Err(ham_core::Error::Config(format!("checkpoint was trained with a different {key}")).into());
        }
    }
    let schedule = ckpt.schedule.build(steps)?;
    Ok((ckpt.denoiser, schedule))
}

fn png_input(model: &Denoiser, path: &Path) -> Result<ham_core::Tensor> {
    let c = model.config();
    if c.latent_channels != 3 {
        return Err(CliError::Usage(format!(
            "PNG input needs a 3-channel model, checkpoint has {}",
            c.latent_channels
        )));
    }
    Ok(load_png(path, c.latent_size)?)
}

pub fn reconstruct(cfg: &RunConfig, checkpoint: &Path, content: &Path, out: &Path) -> Result<()> {
    let (model, schedule) = load_model(cfg, checkpoint)?;
    let latent = png_input(&model, content)?;
    let recon = reconstruct_latent(&model, &schedule, &latent, Condition::NULL)?;
    save_png(out, &recon)?;
    Ok(())
}

pub fn invert(cfg: &RunConfig, checkpoint: &Path, content: &Path, out: &Path, dump_trace: Option<&Path>) -> Result<()> {
    let (model, schedule) = load_model(cfg, checkpoint)?;
    let latent = png_input(&model, content)?;
    let (z_t, trace) = invert_image(&model, &schedule, &latent, Condition::NULL)?;
    hamt::write(out, &z_t)?;
    if let Some(dir) = dump_trace {
        write_trace(dir, &trace)?;
    }
    Ok(())
}

pub struct StyleInputs {
    checkpoint: PathBuf,
    content: PathBuf,
    style: Option<PathBuf>,
    style_condition: Option<String>,
}

impl StyleInputs {
    pub fn from_args(a: &StyleArgs) -> Self {
        Self {
            checkpoint: a.model.checkpoint.clone(),
            content: a.content.clone(),
            style: a.style.clone(),
            style_condition: a.style_condition.clone(),
        }
    }
}

fn parse_condition(raw: &str) -> Result<Condition> {
    if let Ok(id) = raw.parse::<usize>() {
        return Ok(Condition(id));
    }
    ImageClass::STYLES
        .into_iter()
        .find(|k| k.name() == raw)
        .map(ImageClass::condition)
        .ok_or_else(|| CliError::Usage(format!("unknown style condition '{raw}'")))
}

struct Prepared {
    model: Denoiser,
    schedule: NoiseSchedule,
    content: ham_core::Tensor,
    style: StyleSource,
    modulation: ham_core::modulation::ModulationConfig,
    seed: u64,
}

fn prepare(cfg: &RunConfig, inputs: &StyleInputs) -> Result<Prepared> {
    let modulation = cfg.modulation()?;
    let seed = cfg.seed()?;
    let condition = inputs.style_condition.as_deref().map(parse_condition).transpose()?;
    let (model, schedule) = load_model(cfg, &inputs.checkpoint)?;
    modulation.validate(model.config().num_blocks, schedule.inference_steps())?;
    let content = png_input(&model, &inputs.content)?;
    let style = match (&inputs.style, condition) {
        (Some(path), _) => StyleSource::Image(png_input(&model, path)?),
        (None, Some(c)) => StyleSource::Condition(c),
        (None, None) => return Err(CliError::Usage("either --style or --style-condition is required".into())),
    };
    Ok(Prepared { model, schedule, content, style, modulation, seed })
}

impl Prepared {
    fn request(&self) -> TransferRequest<'_> {
        TransferRequest {
            model: &self.model,
            schedule: &self.schedule,
            content: &self.content,
            style: &self.style,
            modulation: &self.modulation,
            seed: self.seed,
        }
    }
}

pub fn transfer(
    cfg: &RunConfig,
    inputs: &StyleInputs,
    out: &Path,
    dump_trace: Option<&Path>,
    dump_latents: Option<&Path>,
) -> Result<()> {
    let p = prepare(cfg, inputs)?;
    let result = run_transfer(&p.request())?;
    save_png(out, &result.stylized)?;
    if let Some(dir) = dump_trace {
        write_trace(&dir.join("content"), &result.teachers.content)?;
        write_trace(&dir.join("style"), &result.teachers.style)?;
    }
    if let Some(dir) = dump_latents {
        hamt::write(&dir.join("z_T_content.hamt"), &result.z_t_content)?;
        hamt::write(&dir.join("z_T_style.hamt"), &result.z_t_style)?;
        hamt::write(&dir.join("z_T_main.hamt"), &result.z_t_main)?;
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, inputs: &StyleInputs, out_dir: &Path) -> Result<()> {
    let p = prepare(cfg, inputs)?;
    let rows: Vec<_> = ABLATION_ROWS.iter().map(|&(_, g, l, s)| (g, l, s)).collect();
    let results = ablation_matrix(&p.request(), &rows)?;
    let mut summary = String::from("row,gar,lat,sini,style_distance,content_distance\n");
    for ((label, gar, lat, sini), r) in ABLATION_ROWS.iter().zip(&results) {
        save_png(&out_dir.join(format!("{label}.png")), &r.stylized)?;
        let to_style = channel_stat_distance(&r.stylized, &r.teachers.style_reconstruction())?;
        let to_content = channel_stat_distance(&r.stylized, &r.teachers.content_reconstruction())?;
        writeln!(summary, "{label},{gar},{lat},{sini},{to_style:.6},{to_content:.6}").unwrap();
    }
    write_atomic(&out_dir.join("summary.csv"), summary.as_bytes())?;
    Ok(())
}

pub fn eval(scores: Option<&Path>, table1: bool, out: Option<&Path>) -> Result<()> {
    let rows = match scores {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
            read_scores_csv(file)?
        }
        None => read_scores_csv(TABLE1_CSV.as_bytes())?,
    };
    let mut report = Vec::new();
    write_report(&rows, &mut report)?;
    match out {
        Some(path) => write_atomic(path, &report)?,
        None => std::io::stdout()
            .write_all(&report)
            .map_err(|e| CliError::Usage(format!("cannot write report: {e}")))?,
    }
    if table1 {
        let mut matched = 0;
        for (row, rep) in rows.iter().zip(TABLE1_REPORTED) {
            let dc = dc_score(&row.scores)?;
            let cc = cc_score(&row.scores)?;
            for (name, got, want) in [("DC", dc, rep.dc), ("CC", cc, rep.cc)] {
                if matches_reported(got, want) {
                    matched += 1;
                } else {
                    eprintln!("{} {name}: computed {got:.5}, reported {want}", rep.method);
                }
            }
        }
        let total = 2 * TABLE1_REPORTED.len();
        eprintln!("table1: {matched}/{total} composites match the reported values");
        if matched != total {
            return Err(ham_core::Error::Numeric {
                step: 0,
                detail: format!("{} composites differ from the reported table", total - matched),
            }
            .into());
        }
    }
    Ok(())
}

pub fn gen_fixtures(out_dir: &Path, count: usize, size: usize) -> Result<()> {
    if count == 0 || size == 0 {
        return Err(CliError::Usage("count and size must be positive".into()));
    }
    for i in 0..count {
        let (content, style, class) = fixture_pair(i, 3, size)?;
        save_png(&out_dir.join(format!("content_{i:02}.png")), &content)?;
        save_png(&out_dir.join(format!("style_{i:02}_{}.png", class.name())), &style)?;
    }
    eprintln!("wrote {count} fixture pairs to {}", out_dir.display());
    Ok(())
}
