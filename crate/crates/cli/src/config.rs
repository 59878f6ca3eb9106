//! Flat run configuration: a registry of keys, presets, `key = value` and
//! TOML files, and the rendered form stored in checkpoints.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rolldiff_core::diffusion::{NoiseSchedule, TrainConfig};
use rolldiff_core::pianoroll::RollGeometry;
use rolldiff_core::ssm::InputDiscretization;
use rolldiff_core::unet::UNetConfig;
use rolldiff_core::wavelet::WaveletLossForm;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: expected {expected}")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("{path}:{line}: {detail}")]
    Syntax { path: String, line: usize, detail: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown preset {0:?} (expected paper or desk)")]
    UnknownPreset(String),
    #[error("{0}")]
    Invalid(String),
}

/// Every config key with a one-line description. Each is also a
/// command-line flag `--<key> VALUE`.
pub const KEYS: &[(&str, &str)] = &[
    ("geometry", "pianoroll planes the network sees: full (128×128) or desk (32×32)"),
    ("base_channels", "width of the first U-Net level"),
    ("channel_mults", "comma-separated width multipliers, one per level"),
    ("attn_max_tokens", "Transformer-Mamba blocks run at levels with at most this many pixels"),
    ("res_blocks", "residual blocks per level"),
    ("heads", "attention heads"),
    ("enable_wavelet_skips", "filter skip connections through wavelet blocks"),
    ("enable_mamba", "add the Mamba stage after each transformer"),
    ("wavelet_filter_len", "length of the learnable wavelet filters"),
    ("wavelet_expansion", "channel expansion of the wavelet-domain depthwise conv"),
    ("mamba_state", "state size of the selective scan"),
    ("mamba_expand", "inner width multiplier of the Mamba block"),
    ("mamba_conv_width", "causal conv width of the Mamba block"),
    ("mamba_discretization", "input discretization: zoh or euler"),
    ("mamba_skip", "keep the D·u skip term of the scan"),
    ("diffusion_steps", "number of diffusion steps T"),
    ("beta_start", "first noise variance of the linear schedule"),
    ("beta_end", "last noise variance of the linear schedule"),
    ("lr", "Adam learning rate"),
    ("batch_size", "training minibatch size"),
    ("cond_dropout", "probability of replacing the chords with the null condition"),
    ("guidance", "classifier-free guidance scale"),
    ("wavelet_weight", "weight of the wavelet filter loss"),
    ("wavelet_loss", "filter loss form: per_lag or scalar"),
    ("max_steps", "train until this many optimizer steps"),
    ("checkpoint_every", "steps between checkpoints (0: only at the end)"),
    ("seed", "seed of all random streams"),
    ("split_seed", "seed of the song-level train/val split"),
    ("dataset", "dataset file"),
    ("checkpoint", "checkpoint file"),
    ("metrics", "training metrics CSV"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(ConfigError::UnknownPreset(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub geometry: RollGeometry,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub split_seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn parse<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into(), expected })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), expected: "true or false" }),
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let paper = RunConfig {
            geometry: RollGeometry::FULL,
            unet: UNetConfig::paper(),
            train: TrainConfig::default(),
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            split_seed: 0,
            dataset: "dataset.prll".into(),
            checkpoint: "model.ckpt".into(),
            metrics: "metrics.csv".into(),
        };
        match p {
            Preset::Paper => paper,
            Preset::Desk => RunConfig {
                geometry: RollGeometry::DESK,
                unet: UNetConfig::desk(),
                train: TrainConfig { lr: 5e-4, ..paper.train.clone() },
                ..paper
            },
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let u = &mut self.unet;
        let t = &mut self.train;
        match key {
            "geometry" => {
                self.geometry = match value.trim() {
                    "full" => RollGeometry::FULL,
                    "desk" => RollGeometry::DESK,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: value.into(), expected: "full or desk" }),
                }
            }
            "base_channels" => u.base_channels = parse(key, value, "a positive integer")?,
            "channel_mults" => {
                u.channel_mults = value
                    .trim()
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .map(|s| parse(key, s, "comma-separated positive integers"))
                    .collect::<Result<_, _>>()?
            }
            "attn_max_tokens" => u.attn_max_tokens = parse(key, value, "an integer")?,
            "res_blocks" => u.res_blocks = parse(key, value, "a positive integer")?,
            "heads" => u.heads = parse(key, value, "a positive integer")?,
            "enable_wavelet_skips" => u.enable_wavelet_skips = parse_bool(key, value)?,
            "enable_mamba" => u.enable_mamba = parse_bool(key, value)?,
            "wavelet_filter_len" => u.wavelet_filter_len = parse(key, value, "an even integer ≥ 2")?,
            "wavelet_expansion" => u.wavelet_expansion = parse(key, value, "a positive integer")?,
            "mamba_state" => u.mamba.state = parse(key, value, "a positive integer")?,
            "mamba_expand" => u.mamba.expand = parse(key, value, "a positive integer")?,
            "mamba_conv_width" => u.mamba.conv_width = parse(key, value, "a positive integer")?,
            "mamba_discretization" => {
                u.mamba.discretization = match value.trim() {
                    "zoh" => InputDiscretization::ZeroOrderHold,
                    "euler" => InputDiscretization::Euler,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: value.into(), expected: "zoh or euler" }),
                }
            }
            "mamba_skip" => u.mamba.use_skip = parse_bool(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value, "an integer ≥ 2")?,
            "beta_start" => self.beta_start = parse(key, value, "a number")?,
            "beta_end" => self.beta_end = parse(key, value, "a number")?,
            "lr" => t.lr = parse(key, value, "a positive number")?,
            "batch_size" => t.batch_size = parse(key, value, "a positive integer")?,
            "cond_dropout" => t.cond_dropout = parse(key, value, "a probability")?,
            "guidance" => t.guidance = parse(key, value, "a non-negative number")?,
            "wavelet_weight" => t.wavelet_weight = parse(key, value, "a non-negative number")?,
            "wavelet_loss" => {
                t.wavelet_loss = match value.trim() {
                    "per_lag" => WaveletLossForm::PerLag,
                    "scalar" => WaveletLossForm::Scalar,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: value.into(), expected: "per_lag or scalar" }),
                }
            }
            "max_steps" => t.max_steps = parse(key, value, "an integer")?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value, "an integer")?,
            "seed" => t.seed = parse(key, value, "an unsigned integer")?,
            "split_seed" => self.split_seed = parse(key, value, "an unsigned integer")?,
            "dataset" => self.dataset = value.trim().into(),
            "checkpoint" => self.checkpoint = value.trim().into(),
            "metrics" => self.metrics = value.trim().into(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let u = &self.unet;
        let t = &self.train;
        KEYS.iter()
            .map(|&(k, _)| {
                let v = match k {
                    "geometry" => if self.geometry == RollGeometry::DESK { "desk" } else { "full" }.to_string(),
                    "base_channels" => u.base_channels.to_string(),
                    "channel_mults" => join(&u.channel_mults),
                    "attn_max_tokens" => u.attn_max_tokens.to_string(),
                    "res_blocks" => u.res_blocks.to_string(),
                    "heads" => u.heads.to_string(),
                    "enable_wavelet_skips" => u.enable_wavelet_skips.to_string(),
                    "enable_mamba" => u.enable_mamba.to_string(),
                    "wavelet_filter_len" => u.wavelet_filter_len.to_string(),
                    "wavelet_expansion" => u.wavelet_expansion.to_string(),
                    "mamba_state" => u.mamba.state.to_string(),
                    "mamba_expand" => u.mamba.expand.to_string(),
                    "mamba_conv_width" => u.mamba.conv_width.to_string(),
                    "mamba_discretization" => match u.mamba.discretization {
                        InputDiscretization::ZeroOrderHold => "zoh",
                        InputDiscretization::Euler => "euler",
                    }
                    .to_string(),
                    "mamba_skip" => u.mamba.use_skip.to_string(),
                    "diffusion_steps" => self.diffusion_steps.to_string(),
                    "beta_start" => self.beta_start.to_string(),
                    "beta_end" => self.beta_end.to_string(),
                    "lr" => t.lr.to_string(),
                    "batch_size" => t.batch_size.to_string(),
                    "cond_dropout" => t.cond_dropout.to_string(),
                    "guidance" => t.guidance.to_string(),
                    "wavelet_weight" => t.wavelet_weight.to_string(),
                    "wavelet_loss" => match t.wavelet_loss {
                        WaveletLossForm::PerLag => "per_lag",
                        WaveletLossForm::Scalar => "scalar",
                    }
                    .to_string(),
                    "max_steps" => t.max_steps.to_string(),
                    "checkpoint_every" => t.checkpoint_every.to_string(),
                    "seed" => t.seed.to_string(),
                    "split_seed" => self.split_seed.to_string(),
                    "dataset" => self.dataset.display().to_string(),
                    "checkpoint" => self.checkpoint.display().to_string(),
                    "metrics" => self.metrics.display().to_string(),
                    _ => unreachable!("every registered key is rendered"),
                };
                (k, v)
            })
            .collect()
    }

    /// `key = value` lines for every key.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (k, v, line) in parse_lines(text, origin)? {
            self.set(&k, &v).map_err(|e| match e {
                ConfigError::UnknownKey(_) | ConfigError::BadValue { .. } => {
                    ConfigError::Syntax { path: origin.into(), line, detail: e.to_string() }
                }
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
            .map_err(|e| ConfigError::Invalid(format!("noise schedule: {e}")))
    }

    /// Network config with its step count tied to the schedule.
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig { max_time: self.diffusion_steps, ..self.unet.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.schedule()?;
        self.unet_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let f = 1usize << self.unet.channel_mults.len();
        if self.geometry.pitches % f != 0 || self.geometry.frames() % f != 0 {
            return Err(ConfigError::Invalid(format!(
                "{} levels need planes divisible by {f}",
                self.unet.channel_mults.len()
            )));
        }
        Ok(())
    }
}

/// `(key, value, line)` triples of a `key = value` text.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            path: origin.into(),
            line: i + 1,
            detail: "expected key = value".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

/// Key/value pairs of a config file: TOML when the extension is `.toml`,
/// `key = value` lines otherwise.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, ConfigError> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: origin.clone(), source })?;
    if path.extension().is_some_and(|e| e == "toml") {
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| ConfigError::Syntax { path: origin.clone(), line: 0, detail: e.to_string() })?;
        table
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    toml::Value::String(s) => s,
                    toml::Value::Integer(i) => i.to_string(),
                    toml::Value::Float(f) => f.to_string(),
                    toml::Value::Boolean(b) => b.to_string(),
                    toml::Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                    other => {
                        return Err(ConfigError::BadValue { key: k, value: other.to_string(), expected: "a scalar or an array" })
                    }
                };
                Ok((k, s))
            })
            .collect()
    } else {
        Ok(parse_lines(&text, &origin)?.into_iter().map(|(k, v, _)| (k, v)).collect())
    }
}
