//! Identifiability test, Gaussian entropies of representations, channel
//! correlation and attention-head divergence.

use std::f64::consts::{E, PI};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{AttentionTrace, Model, SeriesBatch};
use crate::normlayers::NormParamSet;
use crate::numerics::{logdet_psd, RngState, Tensor};
use crate::training::parallel;
use crate::{Error, Result};

pub const DEFAULT_EPS_ENT: f64 = 1e-4;
pub const DEFAULT_TOL_EQ: f64 = 1e-9;
pub const DEFAULT_TOL_NEQ: f64 = 1e-6;
pub const HIST_BINS: usize = 40;
const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CidVerdict {
    NonCid,
    Cid,
    Indeterminate,
}

impl fmt::Display for CidVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CidVerdict::NonCid => "NON_CID",
            CidVerdict::Cid => "CID",
            CidVerdict::Indeterminate => "INDETERMINATE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CidResult {
    pub verdict: CidVerdict,
    /// `max |ŷ₀ − ŷ₁|` over the batch and horizon.
    pub max_gap: f64,
}

/// Feeds a seeded random batch whose channel 1 is a copy of channel 0 and
/// compares the two forecasts.
pub fn cid_test(model: &Model, seed: u64, tol_eq: f64, tol_neq: f64) -> Result<CidResult> {
    let cfg = &model.config;
    if cfg.channels < 2 {
        return Err(Error::InvalidArgument(format!(
            "identifiability test needs C >= 2, got {}",
            cfg.channels
        )));
    }
    let (b, l, c) = (4, cfg.lookback, cfg.channels);
    let mut x = Tensor::randn(&[b, l, c], 1.0, &mut RngState::new(seed).stream("cid/input"));
    for row in x.data_mut().chunks_mut(c) {
        row[1] = row[0];
    }
    let y = model.predict(&SeriesBatch::new(x)?)?;
    let max_gap = y
        .values()
        .data()
        .chunks(c)
        .map(|row| (row[0] - row[1]).abs())
        .fold(0.0, f64::max);
    let verdict = if max_gap <= tol_eq {
        CidVerdict::NonCid
    } else if max_gap > tol_neq {
        CidVerdict::Cid
    } else {
        CidVerdict::Indeterminate
    };
    Ok(CidResult { verdict, max_gap })
}

/// Adds `delta` to channel `channel`'s scale row in every CN layer (the
/// global scale for ACN). Returns the number of layers changed.
pub fn perturb_channel_scale(model: &mut Model, channel: usize, delta: f64) -> usize {
    let mut touched = 0;
    for layer in model.params.norm_layers_mut() {
        let alpha = match layer {
            NormParamSet::Cn(p) => &mut p.alpha,
            NormParamSet::Acn(p) => &mut p.alpha_g,
            _ => continue,
        };
        if channel < alpha.shape()[0] {
            alpha.row_mut(channel).iter_mut().for_each(|v| *v += delta);
            touched += 1;
        }
    }
    touched
}

/// Gaussian entropy from the uncentered second moment,
/// `½ log((2πe)^D det((1/N) zᵀz + εI))`, divided by `D`.
pub fn gaussian_entropy(samples: &Tensor, eps_ent: f64) -> Result<f64> {
    gaussian_entropy_parts(samples, eps_ent).map(|(h, _)| h)
}

/// Returns the per-dimension entropy and the raw log-determinant.
pub fn gaussian_entropy_parts(samples: &Tensor, eps_ent: f64) -> Result<(f64, f64)> {
    let (n, d) = samples.dims2()?;
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(
            "entropy needs at least one sample of one dimension".into(),
        ));
    }
    if !(eps_ent > 0.0) {
        return Err(Error::InvalidArgument(format!("eps_ent must be > 0, got {eps_ent}")));
    }
    let mut m = vec![0.0; d * d];
    for row in samples.data().chunks(d) {
        for i in 0..d {
            let ri = row[i];
            for j in i..d {
                m[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = m[i * d + j] / n as f64;
            m[i * d + j] = v;
            m[j * d + i] = v;
        }
        m[i * d + i] += eps_ent;
    }
    let logdet = logdet_psd(&Tensor::new(&[d, d], m)?)?;
    let h = 0.5 * (d as f64 * (2.0 * PI * E).ln() + logdet);
    if !h.is_finite() {
        return Err(Error::NonFinite("gaussian_entropy"));
    }
    Ok((h / d as f64, logdet))
}

/// Average encoder output over a set of windows, `C×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanRepresentation {
    pub z_bar: Tensor,
}

impl MeanRepresentation {
    pub fn new(z_bar: Tensor) -> Result<Self> {
        z_bar.dims2()?;
        Ok(Self {
            z_bar: z_bar.ensure_finite("mean_representation")?,
        })
    }
}

/// Mean of the encoder tokens over every window of `inputs`.
pub fn mean_representation(model: &Model, inputs: &SeriesBatch) -> Result<MeanRepresentation> {
    let (c, d) = (inputs.channels(), model.config.d_model);
    if inputs.batch() == 0 {
        return Err(Error::Data("no windows to average".into()));
    }
    let parts = parallel::map_chunks(inputs.batch(), |s, e| {
        let (_, cache) = model.forward(&inputs.slice(s, e))?;
        let mut acc = vec![0.0; c * d];
        for slab in cache.encoded().data().chunks(c * d) {
            for (a, v) in acc.iter_mut().zip(slab) {
                *a += v;
            }
        }
        Ok(acc)
    })?;
    let mut sum = vec![0.0; c * d];
    for p in parts {
        for (a, v) in sum.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = inputs.batch() as f64;
    MeanRepresentation::new(Tensor::new(&[c, d], sum.into_iter().map(|v| v / n).collect())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Entropy of the `C` rows of `z̄` as samples in `D` dimensions, per dimension.
    pub feature_entropy: f64,
    /// Entropy of the `D` columns of `z̄` as samples in `C` dimensions, per dimension.
    pub channel_entropy: f64,
    pub eps_ent: f64,
    pub feature_logdet: f64,
    pub channel_logdet: f64,
}

pub fn channel_feature_entropy(rep: &MeanRepresentation, eps_ent: f64) -> Result<EntropyReport> {
    let (feature_entropy, feature_logdet) = gaussian_entropy_parts(&rep.z_bar, eps_ent)?;
    let (channel_entropy, channel_logdet) = gaussian_entropy_parts(&rep.z_bar.t()?, eps_ent)?;
    Ok(EntropyReport {
        feature_entropy,
        channel_entropy,
        eps_ent,
        feature_logdet,
        channel_logdet,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Row-major `C×C` Pearson correlation between channel rows.
    pub corr: Vec<f64>,
    pub channels: usize,
    /// Counts of the strict upper-triangle entries in 40 equal bins on `[-1, 1]`.
    pub offdiag_hist: Vec<usize>,
    pub offdiag_std: f64,
}

impl CorrelationReport {
    pub fn matrix(&self) -> Tensor {
        Tensor::new(&[self.channels, self.channels], self.corr.clone()).expect("square")
    }

    /// Lower edge of each histogram bin.
    pub fn bin_edges() -> Vec<f64> {
        (0..=HIST_BINS)
            .map(|i| -1.0 + 2.0 * i as f64 / HIST_BINS as f64)
            .collect()
    }
}

/// Pearson correlation between channel rows of `z̄`. A constant row has
/// correlation 0 with every other row; the diagonal is 1.
pub fn channel_correlation(rep: &MeanRepresentation) -> Result<CorrelationReport> {
    let (c, d) = rep.z_bar.dims2()?;
    let centred: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            let row = rep.z_bar.row(i);
            let m = row.iter().sum::<f64>() / d as f64;
            row.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centred
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut corr = vec![0.0; c * c];
    let mut off = Vec::with_capacity(c * (c - 1) / 2);
    for i in 0..c {
        corr[i * c + i] = 1.0;
        for j in i + 1..c {
            let denom = norms[i] * norms[j];
            let r = if denom > 0.0 {
                (centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum::<f64>() / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            corr[i * c + j] = r;
            corr[j * c + i] = r;
            off.push(r);
        }
    }
    let mut hist = vec![0usize; HIST_BINS];
    for &r in &off {
        let bin = (((r + 1.0) / 2.0) * HIST_BINS as f64).floor() as usize;
        hist[bin.min(HIST_BINS - 1)] += 1;
    }
    let std = if off.is_empty() {
        0.0
    } else {
        let m = off.iter().sum::<f64>() / off.len() as f64;
        (off.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / off.len() as f64).sqrt()
    };
    Ok(CorrelationReport {
        corr,
        channels: c,
        offdiag_hist: hist,
        offdiag_std: std,
    })
}

/// `KL(p ‖ q) = Σ p log(p / q)` with both arguments floored at 1e-12 inside the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(KL_FLOOR).ln() - b.max(KL_FLOOR).ln()))
        .sum()
}

/// Per layer, the mean over unordered head pairs of the symmetrized
/// divergence `½(KL(a‖b) + KL(b‖a))`, averaged over batch and query rows.
/// A single-head layer reports 0.
pub fn head_kld(trace: &AttentionTrace) -> Result<Vec<f64>> {
    trace
        .layers
        .iter()
        .enumerate()
        .map(|(li, t)| {
            if t.ndim() != 4 || t.shape()[2] != t.shape()[3] {
                return Err(Error::shape(
                    "head_kld",
                    format!("layer {li} trace has shape {:?}", t.shape()),
                ));
            }
            let (b, heads, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            for row in t.data().chunks(c) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::InvalidArgument(format!(
                        "layer {li} trace has a row that is not a distribution (sum {s})"
                    )));
                }
            }
            if heads < 2 {
                return Ok(0.0);
            }
            let slab = |bi: usize, h: usize| &t.data()[(bi * heads + h) * c * c..(bi * heads + h + 1) * c * c];
            let mut total = 0.0;
            let mut pairs = 0usize;
            for h1 in 0..heads {
                for h2 in h1 + 1..heads {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        for (p, q) in slab(bi, h1).chunks(c).zip(slab(bi, h2).chunks(c)) {
                            acc += 0.5 * (kl_divergence(p, q) + kl_divergence(q, p));
                        }
                    }
                    total += acc / (b * c) as f64;
                    pairs += 1;
                }
            }
            Ok(total / pairs as f64)
        })
        .collect()
}

/// Everything the diagnostics produce for one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub norm: String,
    pub cid: CidResult,
    pub entropy: EntropyReport,
    pub baseline_entropy: Option<EntropyReport>,
    pub correlation: CorrelationReport,
    /// One value per attention layer; empty for backbones without attention.
    pub head_kld: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticsOptions {
    pub eps_ent: f64,
    pub seed: u64,
    pub tol_eq: f64,
    pub tol_neq: f64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            eps_ent: DEFAULT_EPS_ENT,
            seed: 7,
            tol_eq: DEFAULT_TOL_EQ,
            tol_neq: DEFAULT_TOL_NEQ,
        }
    }
}

/// Runs every diagnostic on `subject` over the test windows `inputs`,
/// optionally alongside the entropies of a `baseline` model.
pub fn diagnose(
    subject: &Model,
    baseline: Option<&Model>,
    inputs: &SeriesBatch,
    opts: &DiagnosticsOptions,
) -> Result<DiagnosticsReport> {
    let rep = mean_representation(subject, inputs)?;
    let baseline_entropy = baseline
        .map(|m| channel_feature_entropy(&mean_representation(m, inputs)?, opts.eps_ent))
        .transpose()?;
    let probe = inputs.slice(0, inputs.batch().min(parallel::CHUNK));
    let (_, cache) = subject.forward(&probe)?;
    Ok(DiagnosticsReport {
        norm: subject.config.norm.kind.to_string(),
        cid: cid_test(subject, opts.seed, opts.tol_eq, opts.tol_neq)?,
        entropy: channel_feature_entropy(&rep, opts.eps_ent)?,
        baseline_entropy,
        correlation: channel_correlation(&rep)?,
        head_kld: head_kld(cache.trace())?,
    })
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes the correlation matrix, one row per line.
    pub fn write_correlation_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix_csv(&self.correlation.matrix(), path)
    }

    /// Writes `bin_lo,bin_hi,count` rows.
    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let edges = CorrelationReport::bin_edges();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        w.write_record(["bin_lo", "bin_hi", "count"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for (i, n) in self.correlation.offdiag_hist.iter().enumerate() {
            w.write_record([edges[i].to_string(), edges[i + 1].to_string(), n.to_string()])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_matrix_csv(m: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (_, cols) = m.dims2()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for row in m.data().chunks(cols) {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
