//! Experiment configuration as canonical `key = value` text.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown or repeated keys are errors. [`ExperimentConfig::to_text`]
//! writes every key in sorted order, and parsing that text gives back an
//! equal config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbones::{BackboneConfig, BackboneKind};
use crate::datasets::SplitSpec;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Two-channel identifiability toy.
    Toy,
    /// Clustered sine mixture.
    Sine,
    /// A CSV file given by `data.path`.
    Csv,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::Toy => "toy",
            DataSource::Sine => "sine",
            DataSource::Csv => "csv",
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(DataSource::Toy),
            "sine" => Ok(DataSource::Sine),
            "csv" => Ok(DataSource::Csv),
            _ => Err(Error::Config(format!("unknown data source `{s}` (toy|sine|csv)"))),
        }
    }
}

/// Window stride: a fixed step, or `auto` (one full period `L + H` on the
/// toy so every window is period-aligned, 1 elsewhere).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stride {
    Auto,
    Fixed(usize),
}

impl fmt::Display for Stride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stride::Auto => f.write_str("auto"),
            Stride::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Stride {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Stride::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Stride::Fixed(n)),
            _ => Err(Error::Config(format!(
                "stride must be `auto` or a positive integer, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub data_path: Option<PathBuf>,
    pub data_timestamp: bool,
    pub toy_amplitude: f64,
    pub toy_periods: usize,
    pub toy_noise: f64,
    pub sine_channels: usize,
    pub sine_length: usize,
    pub sine_noise: f64,
    pub split: SplitSpec,
    pub stride: Stride,
    pub eval_stride: Stride,
    /// `model.channels` is filled in from the data when the experiment runs.
    pub model: BackboneConfig,
    /// `train.seed` also seeds data generation and model initialization.
    pub train: TrainConfig,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Toy,
            data_path: None,
            data_timestamp: false,
            toy_amplitude: 1.0,
            toy_periods: 40,
            toy_noise: 0.01,
            sine_channels: 8,
            sine_length: 2000,
            sine_noise: 0.1,
            split: SplitSpec::SIX_TWO_TWO,
            stride: Stride::Auto,
            eval_stride: Stride::Auto,
            model: BackboneConfig::new(BackboneKind::ChannelAttention, 96, 24, 0),
            train: TrainConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_split(value: &str) -> Result<SplitSpec> {
    let parts: Vec<&str> = value.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "`split`: expected train:val:test, got `{value}`"
        )));
    }
    let nums: Vec<f64> = parts.iter().map(|p| parse("split", p)).collect::<Result<_>>()?;
    let total: f64 = nums.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config(format!("`split`: parts must be positive, got `{value}`")));
    }
    let spec = SplitSpec {
        train: nums[0] / total,
        val: nums[1] / total,
        test: nums[2] / total,
    };
    spec.validate()?;
    Ok(spec)
}

/// Shortest text that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

/// `model.*` and `norm.*` keys of a backbone configuration.
pub fn backbone_entries(m: &BackboneConfig, out: &mut BTreeMap<String, String>) {
    let mut put = |k: &str, v: String| {
        out.insert(k.to_string(), v);
    };
    put("model.backbone", m.kind.to_string());
    put("model.depth", m.depth.to_string());
    put("model.d_model", m.d_model.to_string());
    put("model.heads", m.heads.to_string());
    put("model.ffn_hidden", m.ffn_hidden.to_string());
    put("model.identifier", m.identifier.to_string());
    put("model.instance_norm_io", m.instance_norm_io.to_string());
    put("model.lookback", m.lookback.to_string());
    put("model.horizon", m.horizon.to_string());
    put("norm.kind", m.norm.kind.to_string());
    put("norm.eps", float(m.norm.eps_norm));
    put("norm.tau", float(m.norm.tau));
    put("norm.prototypes", m.norm.prototypes.to_string());
    put("norm.metric", m.norm.metric.to_string());
    put("norm.space", m.norm.space.to_string());
    put("norm.proto_jitter", float(m.norm.proto_jitter));
}

/// Applies one `model.*` / `norm.*` key. Returns `false` for keys outside
/// those groups.
pub fn set_backbone(m: &mut BackboneConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "model.backbone" => m.kind = value.parse()?,
        "model.depth" => m.depth = parse(key, value)?,
        "model.d_model" => m.d_model = parse(key, value)?,
        "model.heads" => m.heads = parse(key, value)?,
        "model.ffn_hidden" => m.ffn_hidden = parse(key, value)?,
        "model.identifier" => m.identifier = value.parse()?,
        "model.instance_norm_io" => m.instance_norm_io = parse_bool(key, value)?,
        "model.lookback" => m.lookback = parse(key, value)?,
        "model.horizon" => m.horizon = parse(key, value)?,
        "model.channels" => m.channels = parse(key, value)?,
        "norm.kind" => m.norm.kind = value.parse()?,
        "norm.eps" => m.norm.eps_norm = parse(key, value)?,
        "norm.tau" => m.norm.tau = parse(key, value)?,
        "norm.prototypes" => m.norm.prototypes = parse(key, value)?,
        "norm.metric" => m.norm.metric = value.parse()?,
        "norm.space" => m.norm.space = value.parse()?,
        "norm.proto_jitter" => m.norm.proto_jitter = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Splits `key = value` text into pairs, rejecting malformed and repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), n + 1).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` given twice", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "model.channels" {
            return Err(Error::Config("`model.channels` is taken from the data".into()));
        }
        if set_backbone(&mut self.model, key, value)? {
            return Ok(());
        }
        match key {
            "data" => self.data = value.parse()?,
            "data.path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.timestamp" => self.data_timestamp = parse_bool(key, value)?,
            "toy.amplitude" => self.toy_amplitude = parse(key, value)?,
            "toy.periods" => self.toy_periods = parse(key, value)?,
            "toy.noise" => self.toy_noise = parse(key, value)?,
            "sine.channels" => self.sine_channels = parse(key, value)?,
            "sine.length" => self.sine_length = parse(key, value)?,
            "sine.noise" => self.sine_noise = parse(key, value)?,
            "split" => self.split = parse_split(value)?,
            "stride" => self.stride = value.parse()?,
            "eval_stride" => self.eval_stride = value.parse()?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.patience" => self.train.patience = parse(key, value)?,
            "train.record_wall_time" => self.train.record_wall_time = parse_bool(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "output" => self.output = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data == DataSource::Csv && self.data_path.is_none() {
            return Err(Error::Config("`data = csv` needs `data.path`".into()));
        }
        self.split.validate()?;
        self.train.validate()?;
        let mut probe = self.model.clone();
        probe.channels = probe.channels.max(1);
        probe.validate()
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        backbone_entries(&self.model, &mut out);
        let mut put = |k: &str, v: String| {
            out.insert(k.to_string(), v);
        };
        put("data", self.data.to_string());
        put(
            "data.path",
            self.data_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("data.timestamp", self.data_timestamp.to_string());
        put("toy.amplitude", float(self.toy_amplitude));
        put("toy.periods", self.toy_periods.to_string());
        put("toy.noise", float(self.toy_noise));
        put("sine.channels", self.sine_channels.to_string());
        put("sine.length", self.sine_length.to_string());
        put("sine.noise", float(self.sine_noise));
        put(
            "split",
            format!(
                "{}:{}:{}",
                float(self.split.train),
                float(self.split.val),
                float(self.split.test)
            ),
        );
        put("stride", self.stride.to_string());
        put("eval_stride", self.eval_stride.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.lr", float(self.train.learning_rate));
        put("train.patience", self.train.patience.to_string());
        put("train.record_wall_time", self.train.record_wall_time.to_string());
        put("seed", self.train.seed.to_string());
        put("output", self.output.display().to_string());
        out
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Training stride after resolving `auto`.
    pub fn resolved_stride(&self) -> usize {
        self.resolve(self.stride)
    }

    pub fn resolved_eval_stride(&self) -> usize {
        self.resolve(self.eval_stride)
    }

    fn resolve(&self, s: Stride) -> usize {
        match (s, self.data) {
            (Stride::Fixed(n), _) => n,
            (Stride::Auto, DataSource::Toy) => self.model.lookback + self.model.horizon,
            (Stride::Auto, _) => 1,
        }
    }
}
