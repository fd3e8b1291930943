//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! fusion = "mr-p"          # none | mr-p | mr-h
//! up_mode = "repeat"       # repeat | deconv
//! task = "ctc-toy"         # dump | ctc-toy | regress-toy
//!
//! [[encoders]]
//! name = "coarse"
//! row = "C-toy"            # A-toy | B-toy | C-toy
//!
//! [[encoders]]
//! name = "fine"
//! stack = "(10,5)*1 + (3,2)*4 + (2,2)*2"
//! model_dim = 32
//! ffn_dim = 64
//! layers = 3
//! heads = 4
//! channels = 16
//!
//! [train]
//! step_size = 0.005
//! steps = 2000
//!
//! [input]
//! signal = "chirp"
//! duration_s = 1.0
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::audio::SignalKind;
use crate::encoder::EncoderConfig;
use crate::fusion::UpsampleMode;
use crate::resolution::ConvStackSpec;
use crate::rng::SplitMix;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Io { path: String, msg: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionChoice {
    None,
    MrP,
    MrH,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Dump,
    CtcToy,
    RegressToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum UpModeRaw {
    Repeat,
    Deconv,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderRaw {
    name: String,
    row: Option<String>,
    stack: Option<String>,
    model_dim: Option<usize>,
    ffn_dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    channels: Option<usize>,
    sample_rate: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_step")]
    pub step_size: f64,
    #[serde(default = "TrainConfig::default_steps")]
    pub steps: usize,
    #[serde(default = "TrainConfig::default_utterances")]
    pub utterances: usize,
    #[serde(default = "TrainConfig::default_duration")]
    pub duration_s: f64,
    /// Stop once the loss falls below this fraction of the initial loss.
    pub stop_ratio: Option<f64>,
}

impl TrainConfig {
    fn default_step() -> f64 {
        0.005
    }
    fn default_steps() -> usize {
        2000
    }
    fn default_utterances() -> usize {
        10
    }
    fn default_duration() -> f64 {
        0.5
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: Self::default_step(),
            steps: Self::default_steps(),
            utterances: Self::default_utterances(),
            duration_s: Self::default_duration(),
            stop_ratio: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default = "InputConfig::default_signal")]
    pub signal: String,
    #[serde(default = "InputConfig::default_duration")]
    pub duration_s: f64,
    pub wav: Option<String>,
}

impl InputConfig {
    fn default_signal() -> String {
        "chirp".into()
    }
    fn default_duration() -> f64 {
        1.0
    }
}

impl Default for InputConfig {
    fn default() -> Self {
        Self { signal: Self::default_signal(), duration_s: Self::default_duration(), wav: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigRaw {
    seed: u64,
    encoders: Vec<EncoderRaw>,
    #[serde(default = "default_fusion")]
    fusion: FusionChoice,
    #[serde(default = "default_up")]
    up_mode: UpModeRaw,
    #[serde(default = "default_task")]
    task: Task,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    input: InputConfig,
}

fn default_fusion() -> FusionChoice {
    FusionChoice::None
}
fn default_up() -> UpModeRaw {
    UpModeRaw::Repeat
}
fn default_task() -> Task {
    Task::Dump
}

#[derive(Debug, Clone)]
pub struct NamedEncoder {
    pub name: String,
    pub config: EncoderConfig,
}

/// Validated run description.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub encoders: Vec<NamedEncoder>,
    pub fusion: FusionChoice,
    pub up_mode: UpsampleMode,
    pub task: Task,
    pub train: TrainConfig,
    pub input: InputConfig,
}

/// Resolves `A-toy`, `B-toy` or `C-toy`.
pub fn toy_alias(alias: &str, seed: u64) -> Option<EncoderConfig> {
    let row = alias.strip_suffix("-toy")?;
    let mut chars = row.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => EncoderConfig::toy_row(c, seed),
        _ => None,
    }
}

fn encoder_seed(run_seed: u64, index: usize) -> u64 {
    SplitMix::fork(run_seed, index as u64).next_u64()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RunConfigRaw = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        Self::from_raw(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_toml(&text)
    }

    /// Config over toy aliases, e.g. `["A-toy", "B-toy"]`.
    pub fn toy(aliases: &[&str], fusion: FusionChoice, task: Task, seed: u64) -> Result<Self, ConfigError> {
        let encoders = aliases
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let config = toy_alias(a, encoder_seed(seed, i)).ok_or_else(|| invalid(format!("encoders[{i}].row"), format!("unknown alias {a:?}")))?;
                Ok(NamedEncoder { name: a.to_string(), config })
            })
            .collect::<Result<_, ConfigError>>()?;
        let cfg = Self {
            seed,
            encoders,
            fusion,
            up_mode: UpsampleMode::Repeat,
            task,
            train: TrainConfig::default(),
            input: InputConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_raw(raw: RunConfigRaw) -> Result<Self, ConfigError> {
        let mut encoders = Vec::with_capacity(raw.encoders.len());
        for (i, e) in raw.encoders.into_iter().enumerate() {
            encoders.push(resolve_encoder(i, e, encoder_seed(raw.seed, i))?);
        }
        let cfg = Self {
            seed: raw.seed,
            encoders,
            fusion: raw.fusion,
            up_mode: match raw.up_mode {
                UpModeRaw::Repeat => UpsampleMode::Repeat,
                UpModeRaw::Deconv => UpsampleMode::Deconv,
            },
            task: raw.task,
            train: raw.train,
            input: raw.input,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.encoders.is_empty() {
            return Err(invalid("encoders", "at least one encoder is required"));
        }
        for (i, e) in self.encoders.iter().enumerate() {
            e.config.validate().map_err(|err| invalid(format!("encoders[{i}]"), err.to_string()))?;
        }
        let first = &self.encoders[0].config;
        for (i, e) in self.encoders.iter().enumerate().skip(1) {
            if e.config.model_dim != first.model_dim {
                return Err(invalid(format!("encoders[{i}].model_dim"), "all encoders must share model_dim"));
            }
            if e.config.sample_rate != first.sample_rate {
                return Err(invalid(format!("encoders[{i}].sample_rate"), "all encoders must share the sample rate"));
            }
        }
        match self.fusion {
            FusionChoice::None if self.encoders.len() != 1 => {
                return Err(invalid("fusion", "fusion = \"none\" takes exactly one encoder"));
            }
            FusionChoice::MrP => {
                if let Some(i) = self.encoders.iter().position(|e| e.config.layers != first.layers) {
                    return Err(invalid(format!("encoders[{i}].layers"), "mr-p encoders must share their depth"));
                }
            }
            FusionChoice::MrH => {
                if !(2..=3).contains(&self.encoders.len()) {
                    return Err(invalid("encoders", "mr-h takes 2 or 3 encoders"));
                }
                for i in 1..self.encoders.len() {
                    let (a, b) = (self.encoders[i - 1].config.resolution(), self.encoders[i].config.resolution());
                    if a.stride_product <= b.stride_product {
                        return Err(invalid(
                            format!("encoders[{i}]"),
                            format!("mr-h needs strictly decreasing resolutions, got {a} then {b}"),
                        ));
                    }
                }
            }
            _ => {}
        }
        let t = &self.train;
        if !(t.step_size.is_finite() && t.step_size > 0.0) {
            return Err(invalid("train.step_size", "must be a positive number"));
        }
        if t.utterances == 0 {
            return Err(invalid("train.utterances", "must be >= 1"));
        }
        if !(t.duration_s.is_finite() && t.duration_s > 0.0) {
            return Err(invalid("train.duration_s", "must be positive"));
        }
        if let Some(r) = t.stop_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(invalid("train.stop_ratio", "must be positive"));
            }
        }
        self.input.signal.parse::<SignalKind>().map_err(|m| invalid("input.signal", m))?;
        if !(self.input.duration_s.is_finite() && self.input.duration_s > 0.0) {
            return Err(invalid("input.duration_s", "must be positive"));
        }
        Ok(())
    }
}

fn resolve_encoder(i: usize, e: EncoderRaw, seed: u64) -> Result<NamedEncoder, ConfigError> {
    let field = |f: &str| format!("encoders[{i}].{f}");
    let mut cfg = match (&e.row, &e.stack) {
        (Some(_), Some(_)) => return Err(invalid(field("row"), "give either `row` or `stack`, not both")),
        (None, None) => return Err(invalid(field("stack"), "missing; give `row` or `stack`")),
        (Some(alias), None) => toy_alias(alias, seed)
            .ok_or_else(|| invalid(field("row"), format!("unknown alias {alias:?} (A-toy, B-toy, C-toy)")))?,
        (None, Some(stack)) => {
            let stack: ConvStackSpec = stack.parse().map_err(|err: crate::resolution::ResolutionError| invalid(field("stack"), err.to_string()))?;
            EncoderConfig {
                conv_stack: stack,
                model_dim: EncoderConfig::TOY_DIM,
                ffn_dim: EncoderConfig::TOY_FFN,
                layers: EncoderConfig::TOY_LAYERS,
                heads: EncoderConfig::TOY_HEADS,
                conv_channels: EncoderConfig::TOY_CHANNELS,
                sample_rate: 16000,
                seed,
            }
        }
    };
    if let Some(v) = e.model_dim {
        cfg.model_dim = v;
    }
    if let Some(v) = e.ffn_dim {
        cfg.ffn_dim = v;
    }
    if let Some(v) = e.layers {
        cfg.layers = v;
    }
    if let Some(v) = e.heads {
        cfg.heads = v;
    }
    if let Some(v) = e.channels {
        cfg.conv_channels = v;
    }
    if let Some(v) = e.sample_rate {
        cfg.sample_rate = v;
    }
    Ok(NamedEncoder { name: e.name, config: cfg })
}
