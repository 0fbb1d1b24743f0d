//! Channel-as-token forecasting backbones.
//!
//! Every model follows the same pipeline: optional per-window standardization
//! of the input, a shared linear embedding of each channel's lookback window
//! into a `D`-dimensional token, an optional additive channel identifier, an
//! encoder over the `C` tokens, a shared linear head to the horizon and the
//! inverse standardization.
//!
//! With `norm = none | ln` and no identifier every component treats channels
//! symmetrically, so duplicated input channels produce duplicated forecasts.
//! CN-style norms or identifiers break that symmetry.

mod blocks;
mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::normlayers::{NormKind, NormSpec};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub use blocks::{AttentionBlock, Ffn, Linear};
pub use model::{
    add_channel_identifier, channel_attention_encoder, embed_channels, project_forecast, residual_mlp_encoder,
    EncoderLayer, Model, ModelCache, ModelParams,
};

pub const IO_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ChannelAttention,
    ResidualMlp,
    Linear,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::ChannelAttention => "channel_attention",
            BackboneKind::ResidualMlp => "residual_mlp",
            BackboneKind::Linear => "linear",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_attention" | "attention" => Ok(BackboneKind::ChannelAttention),
            "residual_mlp" | "mlp" => Ok(BackboneKind::ResidualMlp),
            "linear" => Ok(BackboneKind::Linear),
            _ => Err(Error::Config(format!(
                "unknown backbone `{s}` (channel_attention|residual_mlp|linear)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierMode {
    None,
    /// Zero-initialized bank trained with the model.
    Learnable,
    /// Seeded unit-Gaussian bank that is never updated.
    FixedConstant,
}

impl IdentifierMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IdentifierMode::None => "none",
            IdentifierMode::Learnable => "learnable",
            IdentifierMode::FixedConstant => "fixed_constant",
        }
    }
}

impl fmt::Display for IdentifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IdentifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IdentifierMode::None),
            "learnable" => Ok(IdentifierMode::Learnable),
            "fixed_constant" | "fixed" | "constant" => Ok(IdentifierMode::FixedConstant),
            _ => Err(Error::Config(format!(
                "unknown identifier mode `{s}` (none|learnable|fixed_constant)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the position-wise MLPs.
    pub ffn_hidden: usize,
    pub norm: NormSpec,
    pub identifier: IdentifierMode,
    pub instance_norm_io: bool,
    pub lookback: usize,
    pub horizon: usize,
    /// Channel count the per-channel banks (CN, ACN, identifiers) are sized for.
    pub channels: usize,
}

impl BackboneConfig {
    /// Desk-scale defaults: `D = 32`, two layers, two heads, ReLU MLP of width `2D`.
    pub fn new(kind: BackboneKind, lookback: usize, horizon: usize, channels: usize) -> Self {
        Self {
            kind,
            depth: 2,
            d_model: 32,
            heads: 2,
            ffn_hidden: 64,
            norm: NormSpec::default(),
            identifier: IdentifierMode::None,
            instance_norm_io: false,
            lookback,
            horizon,
            channels,
        }
    }

    pub fn with_norm(mut self, kind: NormKind) -> Self {
        self.norm.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return fail("lookback, horizon and channels must be positive".into());
        }
        if self.d_model == 0 || self.ffn_hidden == 0 {
            return fail("d_model and ffn_hidden must be positive".into());
        }
        if self.kind != BackboneKind::Linear && self.depth == 0 {
            return fail("depth must be >= 1".into());
        }
        if self.kind == BackboneKind::ChannelAttention && (self.heads == 0 || !self.d_model.is_multiple_of(self.heads))
        {
            return fail(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.kind == BackboneKind::Linear && self.norm.kind != NormKind::None {
            return fail("the linear backbone has no encoder; use norm = none".into());
        }
        if !(self.norm.tau > 0.0) {
            return fail(format!("tau must be > 0, got {}", self.norm.tau));
        }
        if self.norm.kind == NormKind::Pcn && self.norm.prototypes == 0 {
            return fail("PCN needs at least one prototype".into());
        }
        if !(self.norm.eps_norm > 0.0) {
            return fail("eps_norm must be > 0".into());
        }
        Ok(())
    }

    /// Whether the model's parameters pin the channel count.
    pub fn is_channel_bound(&self) -> bool {
        self.norm.kind.is_channel_bound() || self.identifier != IdentifierMode::None
    }
}

/// Lookback windows, `B×L×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    values: Tensor,
}

impl SeriesBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        let (_, _, c) = values.dims3()?;
        if c == 0 {
            return Err(Error::Data("series batch has no channels".into()));
        }
        if !values.is_finite() {
            return Err(Error::Data("series batch contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn lookback(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// The same windows laid out `B×C×L`, one contiguous row per channel.
    pub fn channel_major(&self) -> Tensor {
        self.values.swap_last2().expect("rank 3")
    }

    pub fn from_channel_major(windows: &Tensor) -> Result<Self> {
        Self::new(windows.swap_last2()?)
    }

    /// Windows `start..end` along the batch axis.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        slice_batch(&self.values, start, end)
            .map(|values| Self { values })
            .expect("valid range")
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            values: select_batch(&self.values, indices),
        }
    }
}

/// Forecasts or targets, `B×H×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBatch {
    values: Tensor,
}

impl ForecastBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims3()?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Forecast of channel `c` for window `b`.
    pub fn channel(&self, b: usize, c: usize) -> Vec<f64> {
        (0..self.horizon()).map(|t| self.values.at(&[b, t, c])).collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        slice_batch(&self.values, start, end)
            .map(|values| Self { values })
            .expect("valid range")
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            values: select_batch(&self.values, indices),
        }
    }
}

fn slice_batch(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let shape = t.shape();
    let per: usize = shape[1..].iter().product();
    let mut new_shape = shape.to_vec();
    new_shape[0] = end - start;
    Tensor::new(&new_shape, t.data()[start * per..end * per].to_vec())
}

fn select_batch(t: &Tensor, indices: &[usize]) -> Tensor {
    let shape = t.shape();
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = indices.len();
    Tensor::new(&new_shape, data).expect("consistent shape")
}

/// Per-layer attention weights, each `B×heads×C×C`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Tensor>,
}
