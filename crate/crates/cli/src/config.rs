//! Flat `key = value` run configuration: defaults, then `HAM_SEED`, then an
//! optional config file, then command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use ham_core::denoiser::{DenoiserConfig, TrainOptions};
use ham_core::modulation::ModulationConfig;
use ham_core::scheduler::{ScheduleParams, DEFAULT_INFERENCE_STEPS};

use crate::CliError;

pub const SEED_ENV: &str = "HAM_SEED";

/// Keys describing the network; a checkpoint fixes them.
pub const MODEL_KEYS: [&str; 10] = [
    "latent_channels",
    "latent_size",
    "width",
    "num_blocks",
    "heads",
    "context_tokens",
    "context_dim",
    "patch_size",
    "norm_groups",
    "num_conditions",
];

fn defaults() -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    for (k, v) in DenoiserConfig::default().entries() {
        m.insert(k, v.to_string());
    }
    let s = ScheduleParams::default();
    m.insert("timesteps", s.timesteps.to_string());
    m.insert("beta_start", s.beta_start.to_string());
    m.insert("beta_end", s.beta_end.to_string());
    m.insert("inference_steps", DEFAULT_INFERENCE_STEPS.to_string());
    let md = ModulationConfig::default();
    m.insert("alpha", md.alpha.to_string());
    m.insert("beta", md.beta.to_string());
    m.insert("gamma", md.gamma.to_string());
    m.insert("gar", "true".into());
    m.insert("lat", "true".into());
    m.insert("sini", "true".into());
    m.insert("layer_range", "all".into());
    m.insert("step_range", "all".into());
    m.insert("adain_epsilon", md.adain_epsilon.to_string());
    let t = TrainOptions::default();
    m.insert("train_steps", t.steps.to_string());
    m.insert("lr", t.lr.to_string());
    m.insert("batch_size", t.batch_size.to_string());
    m.insert("cond_dropout", t.cond_dropout.to_string());
    m.insert("seed", "0".into());
    m
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    /// Keys set by the config file or a flag rather than a default.
    explicit: BTreeSet<&'static str>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    /// Defaults with the seed taken from `HAM_SEED` when present.
    pub fn new(seed_env: Option<String>) -> Result<Self, CliError> {
        let mut cfg = Self {
            values: defaults(),
            explicit: BTreeSet::new(),
        };
        if let Some(seed) = seed_env {
            cfg.set("seed", &seed)
                .and_then(|_| cfg.seed())
                .map_err(|e| usage(format!("{SEED_ENV}: {e}")))?;
            cfg.explicit.clear();
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let Some((&k, slot)) = self.values.iter_mut().find(|(k, _)| **k == key) else {
            return Err(usage(format!("unknown config key '{key}'")));
        };
        *slot = value.trim().to_string();
        self.explicit.insert(k);
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got '{pair}'")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| usage(format!("invalid value for {key}: '{raw}'")))
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(usage(format!("invalid boolean for {key}: '{other}'"))),
        }
    }

    fn range(&self, key: &str) -> Result<Option<RangeInclusive<usize>>, CliError> {
        let raw = self.raw(key);
        if raw == "all" {
            return Ok(None);
        }
        let bad = || usage(format!("{key} must be 'all', 'N' or 'A-B', got '{raw}'"));
        let (a, b) = raw.split_once('-').unwrap_or((raw, raw));
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        Ok(Some(a..=b))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn inference_steps(&self) -> Result<usize, CliError> {
        let steps: usize = self.parse("inference_steps")?;
        if steps == 0 {
            return Err(usage("inference_steps must be at least 1"));
        }
        Ok(steps)
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig, CliError> {
        let mut cfg = DenoiserConfig::default();
        for key in MODEL_KEYS {
            let v: usize = self.parse(key)?;
            cfg.set(key, v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<ScheduleParams, CliError> {
        Ok(ScheduleParams {
            timesteps: self.parse("timesteps")?,
            beta_start: self.parse("beta_start")?,
            beta_end: self.parse("beta_end")?,
        })
    }

    pub fn modulation(&self) -> Result<ModulationConfig, CliError> {
        Ok(ModulationConfig {
            alpha: self.parse("alpha")?,
            beta: self.parse("beta")?,
            gamma: self.parse("gamma")?,
            gar_enabled: self.flag("gar")?,
            lat_enabled: self.flag("lat")?,
            sini_enabled: self.flag("sini")?,
            layer_range: self.range("layer_range")?,
            step_range: self.range("step_range")?,
            adain_epsilon: self.parse("adain_epsilon")?,
        })
    }

    pub fn train_options(&self) -> Result<TrainOptions, CliError> {
        let opts = TrainOptions {
            steps: self.parse("train_steps")?,
            lr: self.parse("lr")?,
            batch_size: self.parse("batch_size")?,
            seed: self.seed()?,
            cond_dropout: self.parse("cond_dropout")?,
        };
        if opts.steps == 0 {
            return Err(usage("train_steps must be at least 1"));
        }
        Ok(opts)
    }
}
