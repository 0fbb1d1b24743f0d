use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, ForecastBatch, IdentifierMode, Model, ModelParams, SeriesBatch};
use crate::datasets::WindowSet;
use crate::normlayers::{NormParamSet, NormSpec};
use crate::numerics::{Bank, BankMut, ParamSet, RngState, Tensor};
use crate::Result;

use super::mse_gradient;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Step is `h_rel · max(1, |θ|)`.
    pub h_rel: f64,
    pub tol: f64,
    /// Banks larger than this are checked on a seeded sample of this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h_rel: 1e-5,
            tol: 1e-4,
            max_coords: 200,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub bank: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub banks: Vec<BankCheck>,
    /// Every coordinate whose relative error exceeds `tol`.
    pub failures: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Compares `grads` against central differences of `loss` around `params`
/// on every trainable bank.
pub fn grad_check<P, F>(params: &P, grads: &P, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let rng = RngState::new(opts.seed);
    let pbanks = params.banks();
    let gbanks = grads.banks();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        tol: opts.tol,
        checked: 0,
        banks: Vec::new(),
        failures: Vec::new(),
    };
    for (bi, (pb, gb)) in pbanks.iter().zip(&gbanks).enumerate() {
        if !pb.trainable {
            continue;
        }
        let total = pb.tensor.len();
        let coords: Vec<usize> = if total > opts.max_coords {
            let mut idx = sample(&mut rng.indexed_stream("gradcheck", bi as u64), total, opts.max_coords).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..total).collect()
        };
        let mut bank_max = 0.0f64;
        for &i in &coords {
            let theta = pb.tensor.data()[i];
            let h = opts.h_rel * theta.abs().max(1.0);
            let eval = |delta: f64| -> Result<f64> {
                let mut q = params.clone();
                q.banks_mut()[bi].tensor.data_mut()[i] = theta + delta;
                loss(&q)
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let analytic = gb.tensor.data()[i];
            let rel = relative_error(analytic, numeric);
            bank_max = bank_max.max(rel);
            if !(rel <= opts.tol) {
                report.failures.push(CoordCheck {
                    bank: pb.name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err: rel,
                });
            }
        }
        report.checked += coords.len();
        report.max_rel_err = report.max_rel_err.max(bank_max);
        report.banks.push(BankCheck {
            name: pb.name.clone(),
            checked: coords.len(),
            total,
            max_rel_err: bank_max,
        });
    }
    Ok(report)
}

/// A norm layer together with its input, so that the input gradient is
/// checked alongside the parameter banks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProbe {
    pub layer: NormParamSet,
    pub input: Tensor,
}

impl ParamSet for LayerProbe {
    fn banks(&self) -> Vec<Bank<'_>> {
        let mut out = self.layer.banks();
        out.push(crate::numerics::bank("input", &self.input));
        out
    }

    fn banks_mut(&mut self) -> Vec<BankMut<'_>> {
        let mut out = self.layer.banks_mut();
        out.push(crate::numerics::bank_mut("input", &mut self.input));
        out
    }
}

/// Moves every bank away from its identity initialization so that no
/// coordinate sits on a symmetric or non-differentiable point.
fn perturb<P: ParamSet>(p: &mut P, scale: f64, rng: &mut impl rand::Rng) {
    for b in p.banks_mut() {
        let shape = b.tensor.shape().to_vec();
        b.tensor
            .axpy(1.0, &Tensor::randn(&shape, scale, rng))
            .expect("same shape");
    }
}

/// Checks one norm layer on a random `batch×channels×d` input with window
/// length `l_in`, using the loss `Σ R ⊙ layer(z)` for a fixed random `R`.
pub fn grad_check_layer(
    spec: &NormSpec,
    dims: (usize, usize, usize, usize),
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (b, c, d, l) = dims;
    let rng = RngState::new(opts.seed);
    let mut r = rng.stream("gradcheck/layer");
    let mut layer = NormParamSet::init(spec, c, d, l, &mut r);
    perturb(&mut layer, 0.5, &mut r);
    let probe = LayerProbe {
        layer,
        input: Tensor::randn(&[b, c, d], 1.0, &mut r),
    };
    let windows = Tensor::randn(&[b, c, l], 1.0, &mut r);
    let upstream = Tensor::randn(&[b, c, d], 1.0, &mut r);
    let eps = spec.eps_norm;
    let loss = |p: &LayerProbe| -> Result<f64> {
        let (out, _) = p.layer.forward(&p.input, Some(&windows), eps)?;
        Ok(out.data().iter().zip(upstream.data()).map(|(a, u)| a * u).sum())
    };
    let (_, cache) = probe.layer.forward(&probe.input, Some(&windows), eps)?;
    let (gz, gp) = probe.layer.backward(&cache, &upstream)?;
    let grads = LayerProbe { layer: gp, input: gz };
    grad_check(&probe, &grads, loss, opts)
}

/// Checks a full model on a random batch against a random target under MSE.
/// Norm and identifier banks are perturbed away from their initial values.
pub fn grad_check_model(cfg: &BackboneConfig, batch: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let rng = RngState::new(opts.seed);
    let mut model = Model::new(cfg.clone(), opts.seed)?;
    let mut r = rng.stream("gradcheck/model");
    for n in model.params.norm_layers_mut() {
        perturb(n, 0.3, &mut r);
    }
    if cfg.identifier == IdentifierMode::Learnable {
        if let Some(id) = &mut model.params.identifier {
            *id = Tensor::randn(id.shape(), 0.5, &mut r);
        }
    }
    let x = Tensor::randn(&[batch, cfg.lookback, cfg.channels], 1.0, &mut r);
    let y = Tensor::randn(&[batch, cfg.horizon, cfg.channels], 1.0, &mut r);
    let set = WindowSet {
        inputs: SeriesBatch::new(x)?,
        targets: ForecastBatch::new(y)?,
        stride: 1,
    };
    let (_, grads) = mse_gradient(&model, &set)?;
    let config = model.config.clone();
    let loss = |p: &ModelParams| -> Result<f64> {
        let m = Model {
            config: config.clone(),
            params: p.clone(),
        };
        mse_gradient_free(&m, &set)
    };
    grad_check(&model.params, &grads, loss, opts)
}

fn mse_gradient_free(model: &Model, set: &WindowSet) -> Result<f64> {
    let pred = model.predict(&set.inputs)?;
    super::mse(&pred, &set.targets)
}
