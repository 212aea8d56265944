//! Checkpoint directory: one HAMT file per parameter, a plain-text manifest
//! (`name<TAB>shape<TAB>file`) and a `config.txt` of `key = value` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::config::DenoiserConfig;
use super::weights::DenoiserWeights;
use super::Denoiser;
use crate::error::{Error, Result};
use crate::hamt;
use crate::real::{matrix_to_tensor, tensor_to_matrix};
use crate::scheduler::ScheduleParams;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    /// Noise schedule the weights were trained with.
    pub schedule: ScheduleParams,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, array) in ckpt.denoiser.weights().params() {
        let file = format!("{name}.hamt");
        let (r, c) = array.dim();
        writeln!(manifest, "{name}\t{r}x{c}\t{file}").unwrap();
        hamt::write(&dir.join(&file), &matrix_to_tensor(array)?)?;
    }
    let mut config = String::new();
    for (key, value) in ckpt.denoiser.config().entries() {
        writeln!(config, "{key} = {value}").unwrap();
    }
    writeln!(config, "timesteps = {}", ckpt.schedule.timesteps).unwrap();
    writeln!(config, "beta_start = {}", ckpt.schedule.beta_start).unwrap();
    writeln!(config, "beta_end = {}", ckpt.schedule.beta_end).unwrap();
    hamt::write_atomic(&dir.join(CONFIG_FILE), config.as_bytes())?;
    // manifest last: its presence marks a complete checkpoint
    hamt::write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

fn read_config(path: &Path) -> Result<(DenoiserConfig, ScheduleParams)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = DenoiserConfig::default();
    let mut schedule = ScheduleParams::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format_err(path, format!("line {}: expected key = value", lineno + 1)))?;
        let bad = || format_err(path, format!("line {}: bad value for {key}", lineno + 1));
        match key {
            "timesteps" => schedule.timesteps = value.parse().map_err(|_| bad())?,
            "beta_start" => schedule.beta_start = value.parse().map_err(|_| bad())?,
            "beta_end" => schedule.beta_end = value.parse().map_err(|_| bad())?,
            _ => {
                let v: usize = value.parse().map_err(|_| bad())?;
                if !cfg.set(key, v) {
                    return Err(format_err(path, format!("line {}: unknown key {key}", lineno + 1)));
                }
            }
        }
    }
    Ok((cfg, schedule))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (config, schedule) = read_config(&dir.join(CONFIG_FILE))?;
    config.validate()?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut entries = std::collections::HashMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, file] = fields[..] else {
            return Err(format_err(&manifest_path, format!("line {}: expected 3 fields", lineno + 1)));
        };
        entries.insert(name.to_string(), (shape.to_string(), file.to_string()));
    }

    let mut weights = DenoiserWeights::<f32>::init(&config, 0);
    let expected = weights.params().len();
    if entries.len() != expected {
        return Err(Error::Config(format!(
            "checkpoint lists {} tensors, config expects {expected}",
            entries.len()
        )));
    }
    for (name, slot) in weights.params_mut() {
        let (shape, file) = entries
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
        let (r, c) = slot.dim();
        if *shape != format!("{r}x{c}") {
            return Err(Error::Config(format!(
                "parameter {name} has shape {shape} in the manifest, config expects {r}x{c}"
            )));
        }
        let tensor = hamt::read(&dir.join(file))?;
        let array: Array2<f32> = tensor_to_matrix(&tensor)?;
        if array.dim() != (r, c) {
            return Err(Error::Config(format!(
                "parameter {name} file has shape {:?}, expected {r}x{c}",
                array.dim()
            )));
        }
        *slot = array;
    }
    Ok(Checkpoint {
        denoiser: Denoiser::new(config, weights)?,
        schedule,
    })
}
