//! Flat key=value run configuration: file parsing, `--set` overrides and
//! resolution against per-task defaults.
//!
//! The schema is documented in `schemas/runconfig.md`; every key is
//! optional and unset keys fall back to the task defaults from
//! [`crate::tasks`]. Unknown keys are rejected with the offending key
//! named.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{GenerateConfig, ModelConfig, OptKind, TrainConfig};
use crate::tasks::{self, Task};

/// Environment variable naming the default config file when `--config`
/// is not given.
pub const CONFIG_ENV: &str = "MMIV_CONFIG";

/// Parsed run configuration: every schema key as an optional override.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    // run
    pub task: Option<Task>,
    pub seed: Option<u64>,
    // paths
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    // model dims
    pub channels: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub text_vocab: Option<usize>,
    pub max_context: Option<usize>,
    pub visual_tokens: Option<usize>,
    pub cond_tokens: Option<usize>,
    pub resampler_depth: Option<usize>,
    pub image_size: Option<usize>,
    pub decoder_base: Option<usize>,
    pub decoder_depth: Option<usize>,
    // MMFS settings
    pub mmfs_every: Option<usize>,
    pub mmfs_points: Option<usize>,
    pub mmfs_max_images: Option<usize>,
    pub levels: Option<usize>,
    // schedule
    pub diffusion_steps: Option<usize>,
    pub beta1: Option<f64>,
    pub beta_t: Option<f64>,
    // training
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub lr_decoder: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub dropout: Option<f64>,
    pub optimizer: Option<OptKind>,
    pub decoder_mmfs: Option<bool>,
    // generation
    pub max_new: Option<usize>,
    pub temperature: Option<f64>,
    pub guidance: Option<f64>,
    pub sample_steps: Option<usize>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': '{value}' is not a valid {what}")))
}

impl RunConfig {
    /// Parse a config file body (one `key = value` per line, `#` comments).
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Load the `--config` file, or the `MMIV_CONFIG` one, or an empty
    /// config, then apply `--set key=value` overrides in order.
    pub fn load(explicit: Option<&Path>, sets: &[String]) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut cfg = match explicit.or(env_path.as_deref()) {
            Some(p) => Self::from_file(p)?,
            None => RunConfig::default(),
        };
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got '{s}'"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Set one key from its text form. Unknown keys are an error naming
    /// the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => self.task = Some(value.parse()?),
            "seed" => self.seed = Some(parse(key, value, "unsigned integer")?),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "channels" => self.channels = Some(parse(key, value, "unsigned integer")?),
            "layers" => self.layers = Some(parse(key, value, "unsigned integer")?),
            "heads" => self.heads = Some(parse(key, value, "unsigned integer")?),
            "ffn_mult" => self.ffn_mult = Some(parse(key, value, "unsigned integer")?),
            "text_vocab" => self.text_vocab = Some(parse(key, value, "unsigned integer")?),
            "max_context" => self.max_context = Some(parse(key, value, "unsigned integer")?),
            "visual_tokens" => self.visual_tokens = Some(parse(key, value, "unsigned integer")?),
            "cond_tokens" => self.cond_tokens = Some(parse(key, value, "unsigned integer")?),
            "resampler_depth" => {
                self.resampler_depth = Some(parse(key, value, "unsigned integer")?)
            }
            "image_size" => self.image_size = Some(parse(key, value, "unsigned integer")?),
            "decoder_base" => self.decoder_base = Some(parse(key, value, "unsigned integer")?),
            "decoder_depth" => self.decoder_depth = Some(parse(key, value, "unsigned integer")?),
            "mmfs_every" => self.mmfs_every = Some(parse(key, value, "unsigned integer")?),
            "mmfs_points" => self.mmfs_points = Some(parse(key, value, "unsigned integer")?),
            "mmfs_max_images" => {
                self.mmfs_max_images = Some(parse(key, value, "unsigned integer")?)
            }
            "levels" => self.levels = Some(parse(key, value, "unsigned integer")?),
            "diffusion_steps" => self.diffusion_steps = Some(parse(key, value, "unsigned integer")?),
            "beta1" => self.beta1 = Some(parse(key, value, "number")?),
            "beta_t" => self.beta_t = Some(parse(key, value, "number")?),
            "lambda" => self.lambda = Some(parse(key, value, "number")?),
            "lr" => self.lr = Some(parse(key, value, "number")?),
            "lr_decoder" => self.lr_decoder = Some(parse(key, value, "number")?),
            "steps" => self.steps = Some(parse(key, value, "unsigned integer")?),
            "batch" => self.batch = Some(parse(key, value, "unsigned integer")?),
            "dropout" => self.dropout = Some(parse(key, value, "number")?),
            "optimizer" => {
                self.optimizer = Some(match value {
                    "adam" => OptKind::Adam,
                    "sgd" => OptKind::Sgd,
                    other => {
                        return Err(Error::Config(format!(
                            "key 'optimizer': unknown value '{other}' (expected adam|sgd)"
                        )))
                    }
                })
            }
            "decoder_mmfs" => self.decoder_mmfs = Some(parse(key, value, "boolean")?),
            "max_new" => self.max_new = Some(parse(key, value, "unsigned integer")?),
            "temperature" => self.temperature = Some(parse(key, value, "number")?),
            "guidance" => self.guidance = Some(parse(key, value, "number")?),
            "sample_steps" => self.sample_steps = Some(parse(key, value, "unsigned integer")?),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Task selection: explicit CLI value wins, then the config key.
    pub fn task_or(&self, flag: Option<Task>) -> Result<Task> {
        flag.or(self.task)
            .ok_or_else(|| Error::Config("no task given (flag or 'task=' key)".to_string()))
    }

    /// Model configuration: task defaults with every set key applied.
    pub fn model(&self, task: Task) -> Result<ModelConfig> {
        let mut m = tasks::model_config(task);
        if let Some(c) = self.channels {
            m.llm.channels = c;
            m.llm.mmfs.channels = c;
            m.encoder.channels = c;
            m.visual_resampler.channels = c;
            m.cond_resampler.channels = c;
            m.decoder.channels = c;
            m.decoder.mmfs.channels = c;
        }
        if let Some(v) = self.layers {
            m.llm.layers = v;
        }
        if let Some(v) = self.heads {
            m.llm.heads = v;
        }
        if let Some(v) = self.ffn_mult {
            m.llm.ffn_mult = v;
        }
        if let Some(v) = self.text_vocab {
            m.llm.vocab.text = v;
        }
        if let Some(v) = self.max_context {
            m.llm.max_context = v;
        }
        if let Some(v) = self.mmfs_every {
            m.llm.mmfs_every = v;
        }
        if let Some(v) = self.mmfs_points {
            m.llm.mmfs.points = v;
            m.decoder.mmfs.points = v;
        }
        if let Some(v) = self.mmfs_max_images {
            m.llm.mmfs.max_images = v;
            m.decoder.mmfs.max_images = v;
        }
        if let Some(v) = self.levels {
            m.llm.mmfs.levels = v;
            m.decoder.mmfs.levels = v;
            m.encoder.levels = v;
        }
        if let Some(v) = self.visual_tokens {
            m.visual_resampler.n_out = v;
        }
        if let Some(v) = self.cond_tokens {
            m.cond_resampler.n_out = v;
            m.decoder.cond_tokens = v;
        }
        if let Some(v) = self.resampler_depth {
            m.visual_resampler.depth = v;
            m.cond_resampler.depth = v;
        }
        if let Some(v) = self.image_size {
            m.decoder.height = v;
            m.decoder.width = v;
        }
        if let Some(v) = self.decoder_base {
            m.decoder.base = v;
        }
        if let Some(v) = self.decoder_depth {
            m.decoder.depth = v;
        }
        if let Some(v) = self.diffusion_steps {
            m.diffusion_steps = v;
        }
        if let Some(v) = self.beta1 {
            m.beta1 = v;
        }
        if let Some(v) = self.beta_t {
            m.beta_t = v;
        }
        m.validate()?;
        Ok(m)
    }

    /// Training configuration: task defaults with every set key applied.
    pub fn train(&self, task: Task) -> Result<TrainConfig> {
        let mut t = tasks::train_config(task);
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.lr_decoder {
            t.lr_decoder = v;
        }
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.batch {
            t.batch = v;
        }
        if let Some(v) = self.dropout {
            t.dropout = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.optimizer {
            t.optimizer = v;
        }
        if let Some(v) = self.decoder_mmfs {
            t.decoder_mmfs = v;
        }
        t.validate()?;
        Ok(t)
    }

    /// Sampler configuration for generation; `diffusion_steps` falls back
    /// to the model schedule length.
    pub fn generation(&self, model: &ModelConfig) -> GenerateConfig {
        GenerateConfig {
            max_new: self.max_new.unwrap_or(32),
            temperature: self.temperature,
            guidance: self.guidance.unwrap_or(2.0),
            sample_steps: self.sample_steps.unwrap_or(model.diffusion_steps),
            seed: self.seed.unwrap_or(0),
            forced: Vec::new(),
        }
    }
}
