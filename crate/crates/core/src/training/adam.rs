use serde::{Deserialize, Serialize};

use crate::numerics::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment banks, one per parameter bank, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<P: ParamSet>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.banks().iter().map(|b| Tensor::zeros(b.tensor.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Frozen banks are left untouched.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut OptimizerState) -> Result<()> {
    let gbanks = grads.banks();
    let mut pbanks = params.banks_mut();
    if pbanks.len() != gbanks.len() || pbanks.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameter banks, {} gradient banks, {} moment banks",
                pbanks.len(),
                gbanks.len(),
                state.m.len()
            ),
        ));
    }
    for ((p, g), m) in pbanks.iter().zip(&gbanks).zip(&state.m) {
        if p.tensor.shape() != g.tensor.shape() || p.tensor.shape() != m.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "bank {}: {:?} vs gradient {:?}",
                    p.name,
                    p.tensor.shape(),
                    g.tensor.shape()
                ),
            ));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in pbanks.iter_mut().zip(&gbanks).zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        for (((w, &gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.tensor.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}
