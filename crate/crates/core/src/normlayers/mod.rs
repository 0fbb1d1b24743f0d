//! The normalization family applied to channel tokens `z: B×C×D`.
//!
//! All layers share the same normalized value `Norm(z)` (per-token
//! standardization over the feature axis, population variance, `eps_norm`
//! inside the square root) and differ only in where the affine parameters
//! come from:
//!
//! | layer | scale / shift                                                      |
//! |-------|--------------------------------------------------------------------|
//! | LN    | one `D`-vector shared by every channel                             |
//! | IN    | per-feature vector; statistics taken across channels instead       |
//! | CN    | one row per channel (`C×D`)                                        |
//! | ACN   | global row ⊙ similarity-weighted mix of local rows                 |
//! | PCN   | similarity-weighted mix of `K` prototype rows, any channel count  |
//!
//! Initialization follows the "identity until trained" rule: scales start at
//! one and shifts at zero, so every layer except IN initially returns
//! `Norm(z)` exactly. For ACN the local scale bank starts at one (a convex
//! combination of ones is one) rather than zero, which would zero the output.

mod layers;
mod similarity;
mod stats;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{bank, bank_mut, Bank, BankMut, ParamSet, Tensor};
use crate::{Error, Result};

pub use layers::{acn_forward, cn_forward, in_forward, ln_forward, pcn_forward, NormCache};
pub use similarity::{channel_similarity, prototype_similarity, PrototypeBank};
pub(crate) use stats::standardize as standardize_row;
pub use stats::{normalize_core, NormStats};

pub const DEFAULT_EPS_NORM: f64 = 1e-5;
pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_PROTOTYPES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Ln,
    In,
    Cn,
    Acn,
    Pcn,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [
        NormKind::None,
        NormKind::Ln,
        NormKind::In,
        NormKind::Cn,
        NormKind::Acn,
        NormKind::Pcn,
    ];

    /// Tag byte used by the binary parameter container.
    pub fn code(self) -> u8 {
        match self {
            NormKind::None => 0,
            NormKind::Ln => 1,
            NormKind::In => 2,
            NormKind::Cn => 3,
            NormKind::Acn => 4,
            NormKind::Pcn => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Whether the layer keeps per-channel parameter rows (and so fixes `C`).
    pub fn is_channel_bound(self) -> bool {
        matches!(self, NormKind::Cn | NormKind::Acn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Ln => "ln",
            NormKind::In => "in",
            NormKind::Cn => "cn",
            NormKind::Acn => "acn",
            NormKind::Pcn => "pcn",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm kind `{s}` (none|ln|in|cn|acn|pcn)")))
    }
}

/// Similarity used to weight ACN's local parameters. Distances are negated
/// so that a larger value always means "more similar".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMetric {
    Cosine,
    NegL1,
    NegL2,
}

impl SimMetric {
    pub const ALL: [SimMetric; 3] = [SimMetric::Cosine, SimMetric::NegL1, SimMetric::NegL2];

    pub fn as_str(self) -> &'static str {
        match self {
            SimMetric::Cosine => "cosine",
            SimMetric::NegL1 => "neg_l1",
            SimMetric::NegL2 => "neg_l2",
        }
    }
}

impl fmt::Display for SimMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown similarity metric `{s}` (cosine|neg_l1|neg_l2)")))
    }
}

/// Where ACN measures channel similarity: the raw input window or the
/// layer's own input tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimSpace {
    Data,
    Latent,
}

impl SimSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            SimSpace::Data => "data",
            SimSpace::Latent => "latent",
        }
    }
}

impl fmt::Display for SimSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" | "data_x" | "x" => Ok(SimSpace::Data),
            "latent" | "latent_z" | "z" => Ok(SimSpace::Latent),
            _ => Err(Error::Config(format!("unknown similarity space `{s}` (data|latent)"))),
        }
    }
}

/// Hyper-parameters shared by every norm layer in a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub eps_norm: f64,
    pub tau: f64,
    pub prototypes: usize,
    pub metric: SimMetric,
    pub space: SimSpace,
    /// Standard deviation of noise added to the PCN prototype banks at
    /// initialization. Zero keeps the exact identity initialization, under
    /// which all prototypes receive identical updates.
    pub proto_jitter: f64,
}

impl Default for NormSpec {
    fn default() -> Self {
        Self {
            kind: NormKind::Ln,
            eps_norm: DEFAULT_EPS_NORM,
            tau: DEFAULT_TAU,
            prototypes: DEFAULT_PROTOTYPES,
            metric: SimMetric::Cosine,
            space: SimSpace::Latent,
            proto_jitter: 0.0,
        }
    }
}

impl NormSpec {
    pub fn with_kind(kind: NormKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

/// Shared affine banks of length `D` (LN and IN).
#[derive(Clone, Debug, PartialEq)]
pub struct LnParams {
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl LnParams {
    pub fn identity(d: usize) -> Self {
        Self {
            alpha: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

/// Per-channel affine rows, `C×D` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CnParams {
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl CnParams {
    pub fn identity(c: usize, d: usize) -> Self {
        Self {
            alpha: Tensor::ones(&[c, d]),
            beta: Tensor::zeros(&[c, d]),
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcnParams {
    pub alpha_g: Tensor,
    pub alpha_l: Tensor,
    pub beta_g: Tensor,
    pub beta_l: Tensor,
    pub tau: f64,
    pub metric: SimMetric,
    pub space: SimSpace,
}

impl AcnParams {
    /// `α_G = 1, α_L = 1, β_G = 1, β_L = 0`: effective scale 1, shift 0.
    pub fn identity(c: usize, d: usize, tau: f64, metric: SimMetric, space: SimSpace) -> Self {
        Self {
            alpha_g: Tensor::ones(&[c, d]),
            alpha_l: Tensor::ones(&[c, d]),
            beta_g: Tensor::ones(&[c, d]),
            beta_l: Tensor::zeros(&[c, d]),
            tau,
            metric,
            space,
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha_g.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcnParams {
    /// `K×D` scale prototypes.
    pub alpha_p: Tensor,
    /// `K×D` shift prototypes.
    pub beta_p: Tensor,
    /// `L_in×D` projection `h` from the data window into prototype space.
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub tau: f64,
}

impl PcnParams {
    pub fn identity<R: Rng + ?Sized>(k: usize, d: usize, l_in: usize, tau: f64, rng: &mut R) -> Self {
        Self {
            alpha_p: Tensor::ones(&[k, d]),
            beta_p: Tensor::zeros(&[k, d]),
            proj_w: Tensor::randn(&[l_in, d], 1.0 / (l_in as f64).sqrt(), rng),
            proj_b: Tensor::zeros(&[d]),
            tau,
        }
    }

    pub fn prototypes(&self) -> usize {
        self.alpha_p.shape()[0]
    }

    pub fn input_len(&self) -> usize {
        self.proj_w.shape()[0]
    }
}

/// Row-stochastic weights over channels (ACN, `B×C×C`) or prototypes
/// (PCN, `B×C×K`) together with the pre-softmax similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub weights: Tensor,
    pub raw: Tensor,
}

/// Input-dependent affine banks, `B×C×D` each.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicAffine {
    pub alpha_hat: Tensor,
    pub beta_hat: Tensor,
}

/// Tagged union of every supported norm layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum NormParamSet {
    Identity,
    Ln(LnParams),
    In(LnParams),
    Cn(CnParams),
    Acn(AcnParams),
    Pcn(PcnParams),
}

impl NormParamSet {
    /// Identity initialization for a layer over `channels` tokens of width
    /// `d`; `l_in` is the data-window length PCN's projection consumes.
    pub fn init<R: Rng + ?Sized>(spec: &NormSpec, channels: usize, d: usize, l_in: usize, rng: &mut R) -> Self {
        match spec.kind {
            NormKind::None => NormParamSet::Identity,
            NormKind::Ln => NormParamSet::Ln(LnParams::identity(d)),
            NormKind::In => NormParamSet::In(LnParams::identity(d)),
            NormKind::Cn => NormParamSet::Cn(CnParams::identity(channels, d)),
            NormKind::Acn => NormParamSet::Acn(AcnParams::identity(channels, d, spec.tau, spec.metric, spec.space)),
            NormKind::Pcn => {
                let mut p = PcnParams::identity(spec.prototypes, d, l_in, spec.tau, rng);
                if spec.proto_jitter > 0.0 {
                    let shape = p.alpha_p.shape().to_vec();
                    p.alpha_p
                        .axpy(1.0, &Tensor::randn(&shape, spec.proto_jitter, rng))
                        .expect("same shape");
                    p.beta_p
                        .axpy(1.0, &Tensor::randn(&shape, spec.proto_jitter, rng))
                        .expect("same shape");
                }
                NormParamSet::Pcn(p)
            }
        }
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormParamSet::Identity => NormKind::None,
            NormParamSet::Ln(_) => NormKind::Ln,
            NormParamSet::In(_) => NormKind::In,
            NormParamSet::Cn(_) => NormKind::Cn,
            NormParamSet::Acn(_) => NormKind::Acn,
            NormParamSet::Pcn(_) => NormKind::Pcn,
        }
    }

    /// Temperature, or 0 for layers without one.
    pub fn tau(&self) -> f64 {
        match self {
            NormParamSet::Acn(p) => p.tau,
            NormParamSet::Pcn(p) => p.tau,
            _ => 0.0,
        }
    }

    /// Same structure with every bank zeroed; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for b in out.banks_mut() {
            b.tensor.data_mut().fill(0.0);
        }
        out
    }

    /// Forward pass. `windows` is the channel-major data window `B×C×L`
    /// needed by data-space ACN and by PCN; other layers ignore it.
    pub fn forward(&self, z: &Tensor, windows: Option<&Tensor>, eps_norm: f64) -> Result<(Tensor, NormCache)> {
        layers::forward(self, z, windows, eps_norm)
    }

    /// Returns the gradient w.r.t. the layer input and the parameter gradients.
    pub fn backward(&self, cache: &NormCache, grad_out: &Tensor) -> Result<(Tensor, NormParamSet)> {
        layers::backward(self, cache, grad_out)
    }
}

impl ParamSet for NormParamSet {
    fn banks(&self) -> Vec<Bank<'_>> {
        match self {
            NormParamSet::Identity => vec![],
            NormParamSet::Ln(p) | NormParamSet::In(p) => vec![bank("alpha", &p.alpha), bank("beta", &p.beta)],
            NormParamSet::Cn(p) => vec![bank("alpha", &p.alpha), bank("beta", &p.beta)],
            NormParamSet::Acn(p) => vec![
                bank("alpha_g", &p.alpha_g),
                bank("alpha_l", &p.alpha_l),
                bank("beta_g", &p.beta_g),
                bank("beta_l", &p.beta_l),
            ],
            NormParamSet::Pcn(p) => vec![
                bank("alpha_p", &p.alpha_p),
                bank("beta_p", &p.beta_p),
                bank("proj_w", &p.proj_w),
                bank("proj_b", &p.proj_b),
            ],
        }
    }

    fn banks_mut(&mut self) -> Vec<BankMut<'_>> {
        match self {
            NormParamSet::Identity => vec![],
            NormParamSet::Ln(p) | NormParamSet::In(p) => {
                vec![bank_mut("alpha", &mut p.alpha), bank_mut("beta", &mut p.beta)]
            }
            NormParamSet::Cn(p) => vec![bank_mut("alpha", &mut p.alpha), bank_mut("beta", &mut p.beta)],
            NormParamSet::Acn(p) => vec![
                bank_mut("alpha_g", &mut p.alpha_g),
                bank_mut("alpha_l", &mut p.alpha_l),
                bank_mut("beta_g", &mut p.beta_g),
                bank_mut("beta_l", &mut p.beta_l),
            ],
            NormParamSet::Pcn(p) => vec![
                bank_mut("alpha_p", &mut p.alpha_p),
                bank_mut("beta_p", &mut p.beta_p),
                bank_mut("proj_w", &mut p.proj_w),
                bank_mut("proj_b", &mut p.proj_b),
            ],
        }
    }
}
