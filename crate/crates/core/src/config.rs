//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! class = car
//! grid_h = 32
//! tau = 0.99
//! ```
//!
//! Unknown keys and repeated keys are errors. Every key has a default, so an
//! empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{ConfigError, DataError, Error};
use crate::ibdtc::{Compression, SvdRowScaling};
use crate::scene::{ObjectClass, SceneParams};
use crate::tracker::{ModelConfig, TrainConfig};

/// How the synthetic benchmark is generated.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Sequence `i` of the training split uses scene seed `train_seed + i`.
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub clutter_density: f64,
    pub surface_bias: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_seed: 0,
            test_seed: 1_000_000,
            train_sequences: 200,
            test_sequences: 50,
            frames: 20,
            clutter_density: crate::scene::DEFAULT_CLUTTER_DENSITY,
            surface_bias: 1.0,
        }
    }
}

impl DataConfig {
    pub fn scene(&self, seed: u64, class: ObjectClass) -> SceneParams {
        SceneParams {
            clutter_density: self.clutter_density,
            surface_bias: self.surface_bias,
            ..SceneParams::new(seed, self.frames, class)
        }
    }

    pub fn train_seeds(&self) -> std::ops::Range<u64> {
        self.train_seed..self.train_seed + self.train_sequences as u64
    }

    pub fn test_seeds(&self) -> std::ops::Range<u64> {
        self.test_seed..self.test_seed + self.test_sequences as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.frames < 2 {
            return Err(ConfigError::invalid("frames", self.frames, "sequences need at least 2 frames"));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_density.is_finite()) {
            return Err(ConfigError::invalid("clutter_density", self.clutter_density, "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.surface_bias) {
            return Err(ConfigError::invalid("surface_bias", self.surface_bias, "must lie in [0, 1]"));
        }
        let (a, b) = (self.train_seeds(), self.test_seeds());
        if !a.is_empty() && !b.is_empty() && a.start < b.end && b.start < a.end {
            return Err(ConfigError::Inconsistent(format!(
                "train seeds {}..{} overlap test seeds {}..{}",
                a.start, a.end, b.start, b.end
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(ObjectClass::Car),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            data_dir: None,
            checkpoint: None,
        }
    }
}

const KEYS: &[&str] = &[
    "class",
    "grid_h",
    "grid_w",
    "channels",
    "pool_size",
    "tau",
    "gamma",
    "n_max",
    "compression",
    "svd_row_scaling",
    "use_sfp",
    "model_seed",
    "epochs",
    "batch",
    "lr",
    "lr_decay_factor",
    "lr_decay_every",
    "weight_decay",
    "lambda1",
    "lambda2",
    "lambda3",
    "theta1",
    "theta2",
    "augment",
    "train_seed_shuffle",
    "train_seed",
    "test_seed",
    "train_sequences",
    "test_sequences",
    "frames",
    "clutter_density",
    "surface_bias",
    "data_dir",
    "checkpoint",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::invalid(key, v, "cannot parse"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::invalid(key, v, "expected true or false")),
    }
}

impl Config {
    /// The desk-scale setting used by the benchmark, training and ablation defaults
    /// of the command-line tool.
    pub fn benchmark() -> Self {
        let mut c = Config::default();
        c.model.grid_h = 32;
        c.model.grid_w = 32;
        c.model.channels = 16;
        c.model.gamma = 0.0;
        c.train.epochs = 15;
        c.train.lr = 1e-3;
        c.train.lr_decay_every = 10;
        c.train.weights.theta1 = 0.1;
        c
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        Self::apply_str(Config::default(), text)
    }

    /// Applies `text` on top of `base`.
    pub fn apply_str(mut cfg: Config, text: &str) -> Result<Self, ConfigError> {
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed { line: line_no })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed { line: line_no });
            }
            let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| ConfigError::UnknownKey {
                line: line_no,
                key: key.to_string(),
            })?;
            if seen.contains(known) {
                return Err(ConfigError::Inconsistent(format!("line {line_no}: `{key}` given twice")));
            }
            seen.push(known);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "class" => m.class = v.parse().map_err(|e: String| ConfigError::invalid(key, v, e))?,
            "grid_h" => m.grid_h = parse(key, v)?,
            "grid_w" => m.grid_w = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "pool_size" => m.pool_size = parse(key, v)?,
            "tau" => m.tau = parse(key, v)?,
            "gamma" => m.gamma = parse(key, v)?,
            "n_max" => m.n_max = parse(key, v)?,
            "compression" => m.compression = v.parse()?,
            "svd_row_scaling" => m.svd_row_scaling = v.parse()?,
            "use_sfp" => m.use_sfp = parse_bool(key, v)?,
            "model_seed" => m.seed = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "lambda1" => t.weights.lambda1 = parse(key, v)?,
            "lambda2" => t.weights.lambda2 = parse(key, v)?,
            "lambda3" => t.weights.lambda3 = parse(key, v)?,
            "theta1" => t.weights.theta1 = parse(key, v)?,
            "theta2" => t.weights.theta2 = parse(key, v)?,
            "augment" => t.augment = parse_bool(key, v)?,
            "train_seed_shuffle" => t.seed = parse(key, v)?,
            "train_seed" => d.train_seed = parse(key, v)?,
            "test_seed" => d.test_seed = parse(key, v)?,
            "train_sequences" => d.train_sequences = parse(key, v)?,
            "test_sequences" => d.test_sequences = parse(key, v)?,
            "frames" => d.frames = parse(key, v)?,
            "clutter_density" => d.clutter_density = parse(key, v)?,
            "surface_bias" => d.surface_bias = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self::parse_str(&text)?)
    }

    /// Serializes every key; `parse_str(to_text())` reproduces the configuration.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let compression = match m.compression {
            Compression::Dynamic(mode) => mode.name().to_string(),
            other => other.name().to_string(),
        };
        let scaling = match m.svd_row_scaling {
            SvdRowScaling::Unit => "unit",
            SvdRowScaling::Sigma => "sigma",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("class", m.class.tag().to_string());
        kv("grid_h", m.grid_h.to_string());
        kv("grid_w", m.grid_w.to_string());
        kv("channels", m.channels.to_string());
        kv("pool_size", m.pool_size.to_string());
        kv("tau", m.tau.to_string());
        kv("gamma", m.gamma.to_string());
        kv("n_max", m.n_max.to_string());
        kv("compression", compression);
        kv("svd_row_scaling", scaling.to_string());
        kv("use_sfp", m.use_sfp.to_string());
        kv("model_seed", m.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch.to_string());
        kv("lr", t.lr.to_string());
        kv("lr_decay_factor", t.lr_decay_factor.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("lambda1", t.weights.lambda1.to_string());
        kv("lambda2", t.weights.lambda2.to_string());
        kv("lambda3", t.weights.lambda3.to_string());
        kv("theta1", t.weights.theta1.to_string());
        kv("theta2", t.weights.theta2.to_string());
        kv("augment", t.augment.to_string());
        kv("train_seed_shuffle", t.seed.to_string());
        kv("train_seed", d.train_seed.to_string());
        kv("test_seed", d.test_seed.to_string());
        kv("train_sequences", d.train_sequences.to_string());
        kv("test_sequences", d.test_sequences.to_string());
        kv("frames", d.frames.to_string());
        kv("clutter_density", d.clutter_density.to_string());
        kv("surface_bias", d.surface_bias.to_string());
        if let Some(p) = &self.data_dir {
            kv("data_dir", p.display().to_string());
        }
        if let Some(p) = &self.checkpoint {
            kv("checkpoint", p.display().to_string());
        }
        s
    }

    /// The addition-fusion model this configuration describes, with another compression.
    pub fn with_compression(&self, c: Compression) -> Config {
        let mut out = self.clone();
        out.model.compression = c;
        out
    }
}
