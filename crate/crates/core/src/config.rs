//! `key = value` run configuration. Blank lines and `#` comments are ignored;
//! unknown or repeated keys are errors.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::PoolingMode;
use crate::error::{Error, Result};
use crate::synthetic::NoiseModelConfig;
use crate::training::{MiningStrategy, TrainConfig};

pub const DEFAULT_TEMPLATE_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub noise: NoiseModelConfig,
    pub train: TrainConfig,
    /// Instances per template when writing generated data.
    pub template_size: usize,
    pub mode: PoolingMode,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub reps: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            noise: NoiseModelConfig::default(),
            train: TrainConfig::default(),
            template_size: DEFAULT_TEMPLATE_SIZE,
            mode: PoolingMode::Cfan,
            data: None,
            model: None,
            reps: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value '{value}' for '{key}'"))),
    }
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&crate::io::read_text(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (n, t) = (&mut self.noise, &mut self.train);
        match key {
            "n_subjects" => n.n_subjects = parse(key, value)?,
            "dim" => n.dim = parse(key, value)?,
            "map_dim" => n.map_dim = parse(key, value)?,
            "instances_per_subject" => n.instances_per_subject = parse(key, value)?,
            "sigma_min" => n.sigma_min = parse(key, value)?,
            "sigma_max" => n.sigma_max = parse(key, value)?,
            "quality_latent_dim" => n.quality_latent_dim = parse(key, value)?,
            "mean_scale" => n.mean_scale = parse(key, value)?,
            "data_seed" => n.seed = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "subjects_per_batch" => t.subjects_per_batch = parse(key, value)?,
            "templates_per_subject" => t.templates_per_subject = parse(key, value)?,
            "images_per_template" => t.images_per_template = parse(key, value)?,
            "train_seed" => t.seed = parse(key, value)?,
            "noise_augment" => {
                t.noise_augment = match value {
                    "off" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "normalize_reps" => t.normalize_reps = parse_bool(key, value)?,
            "mining" => {
                t.mining = match value {
                    "batch_hard" => MiningStrategy::BatchHard,
                    "exhaustive" => MiningStrategy::Exhaustive,
                    _ => return Err(Error::Config(format!("invalid value '{value}' for '{key}'"))),
                }
            }
            "template_size" => self.template_size = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "reps" => self.reps = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}
