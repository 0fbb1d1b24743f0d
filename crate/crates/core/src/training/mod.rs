//! Losses, the Adam optimizer, the training loop and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
pub(crate) mod parallel;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{
    grad_check, grad_check_layer, grad_check_model, BankCheck, CoordCheck, GradCheckOptions, GradCheckReport,
    LayerProbe,
};

use crate::backbones::{ForecastBatch, Model, ModelParams, SeriesBatch};
use crate::datasets::WindowSet;
use crate::numerics::{ParamSet, RngState, Tensor};
use crate::{Error, Result};

fn check_pair(op: &'static str, pred: &ForecastBatch, target: &ForecastBatch) -> Result<()> {
    if pred.values().shape() != target.values().shape() {
        return Err(Error::shape(
            op,
            format!(
                "prediction {:?} vs target {:?}",
                pred.values().shape(),
                target.values().shape()
            ),
        ));
    }
    Ok(())
}

/// Mean squared error over all `B·H·C` elements.
pub fn mse(pred: &ForecastBatch, target: &ForecastBatch) -> Result<f64> {
    check_pair("mse", pred, target)?;
    let (s, _) = error_sums(pred.values(), target.values());
    Ok(s / pred.values().len().max(1) as f64)
}

/// Mean absolute error over all `B·H·C` elements.
pub fn mae(pred: &ForecastBatch, target: &ForecastBatch) -> Result<f64> {
    check_pair("mae", pred, target)?;
    let (_, a) = error_sums(pred.values(), target.values());
    Ok(a / pred.values().len().max(1) as f64)
}

fn error_sums(pred: &Tensor, target: &Tensor) -> (f64, f64) {
    pred.data()
        .iter()
        .zip(target.data())
        .fold((0.0, 0.0), |(s, a), (p, t)| {
            let r = p - t;
            (s + r * r, a + r.abs())
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Forecast error of `model` over every window of `set`.
pub fn evaluate(model: &Model, set: &WindowSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty window set".into()));
    }
    let parts = parallel::map_chunks(set.len(), |s, e| {
        let chunk = set.slice(s, e);
        let pred = model.predict(&chunk.inputs)?;
        check_pair("evaluate", &pred, &chunk.targets)?;
        Ok(error_sums(pred.values(), chunk.targets.values()))
    })?;
    let (s, a) = parts.into_iter().fold((0.0, 0.0), |(s, a), (ps, pa)| (s + ps, a + pa));
    let n = set.targets.values().len() as f64;
    Ok(Metrics { mse: s / n, mae: a / n })
}

/// Predictions for every window, in order.
pub fn predict_all(model: &Model, inputs: &SeriesBatch) -> Result<ForecastBatch> {
    let parts = parallel::map_chunks(inputs.batch(), |s, e| model.predict(&inputs.slice(s, e)))?;
    let (h, c) = (model.config.horizon, inputs.channels());
    let data: Vec<f64> = parts.into_iter().flat_map(|p| p.into_values().into_data()).collect();
    ForecastBatch::new(Tensor::new(&[inputs.batch(), h, c], data)?)
}

/// MSE over `batch` and its parameter gradient. Shards are reduced in a
/// fixed order so the result does not depend on the thread count.
pub fn mse_gradient(model: &Model, batch: &WindowSet) -> Result<(f64, ModelParams)> {
    let n = batch.targets.values().len() as f64;
    let parts = parallel::map_chunks(batch.len(), |s, e| {
        let chunk = batch.slice(s, e);
        let (pred, cache) = model.forward(&chunk.inputs)?;
        check_pair("mse_gradient", &pred, &chunk.targets)?;
        let mut resid = pred.into_values();
        resid.axpy(-1.0, chunk.targets.values())?;
        let loss: f64 = resid.data().iter().map(|r| r * r).sum();
        let grad = ForecastBatch::new(resid.scale(2.0 / n))?;
        Ok((loss, model.backward(&cache, &grad)?))
    })?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::Data("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, b) in grads.banks_mut().into_iter().zip(g.banks()) {
            acc.tensor.axpy(1.0, b.tensor)?;
        }
    }
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Store elapsed milliseconds in the log. Off by default so that
    /// repeated runs produce identical logs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 7,
            patience: 10,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the training log. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_mae: f64,
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE (training
    /// MSE when there is no validation set).
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn train_model(
    model: Model,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_model_with(model, train, val, cfg, |_| Ok(()))
}

/// Trains with Adam on MSE, shuffling windows each epoch with a seeded
/// stream. `on_epoch` sees every log line as soon as it is produced.
pub fn train_model_with(
    mut model: Model,
    train: &WindowSet,
    val: Option<&WindowSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let start = cfg.record_wall_time.then(Instant::now);
    let rng = RngState::new(cfg.seed);
    let mut opt = OptimizerState::new(
        &model.params,
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let mut record = |epoch: usize, model: &Model| -> Result<EpochLog> {
        let tr = evaluate(model, train)?;
        let va = val.map(|v| evaluate(model, v)).transpose()?;
        let line = EpochLog {
            epoch,
            train_mse: tr.mse,
            train_mae: tr.mae,
            val_mse: va.map(|m| m.mse),
            val_mae: va.map(|m| m.mae),
            wall_ms: start.map(|t| t.elapsed().as_millis() as u64),
        };
        on_epoch(&line)?;
        Ok(line)
    };
    let first = record(0, &model)?;
    let score = |l: &EpochLog| l.val_mse.unwrap_or(l.train_mse);
    let mut best = (score(&first), 0, model.params.clone());
    log.push(first);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng.indexed_stream("train/shuffle", epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = train.select(idx);
            let (loss, grads) = mse_gradient(&model, &batch).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            adam_step(&mut model.params, &grads, &mut opt)?;
        }
        let line = record(epoch, &model).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        })?;
        let s = score(&line);
        if !s.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log.push(line);
        if s < best.0 {
            best = (s, epoch, model.params.clone());
        } else if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.params = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneConfig, BackboneKind};
    use crate::datasets::{make_windows, RawSeries};
    use crate::normlayers::NormKind;

    fn fb(v: Vec<f64>, shape: &[usize]) -> ForecastBatch {
        ForecastBatch::new(Tensor::new(shape, v).unwrap()).unwrap()
    }

    #[test]
    fn loss_examples() {
        let t = fb(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        let p = fb(vec![3.0, 4.0, 5.0, 6.0], &[1, 2, 2]);
        assert_eq!(mse(&p, &t).unwrap(), 4.0);
        assert_eq!(mae(&p, &t).unwrap(), 2.0);
        assert!(mse(&p, &fb(vec![0.0; 4], &[1, 4, 1])).is_err());
    }

    fn linear_data() -> WindowSet {
        let t = 200;
        let data: Vec<f64> = (0..t)
            .flat_map(|i| {
                let s = i as f64 * 0.3;
                [s.sin(), (0.7 * s).cos()]
            })
            .collect();
        let s = RawSeries::from_matrix(Tensor::new(&[t, 2], data).unwrap()).unwrap();
        make_windows(&s, 16, 4, 1).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let set = linear_data();
        let cfg = BackboneConfig::new(BackboneKind::ChannelAttention, 16, 4, 2).with_norm(NormKind::Cn);
        let model = Model::new(cfg.clone(), 3).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_model(model.clone(), &set, None, &tc).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.log.len(), 1);
        let ln = train_model(Model::new(cfg.with_norm(NormKind::Ln), 3).unwrap(), &set, None, &tc).unwrap();
        assert_eq!(ln.log[0].train_mse, out.log[0].train_mse);
    }

    #[test]
    fn linear_backbone_fits_sinusoids() {
        let set = linear_data();
        let mut cfg = BackboneConfig::new(BackboneKind::Linear, 16, 4, 2);
        cfg.norm.kind = NormKind::None;
        let tc = TrainConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-2,
            patience: 0,
            ..TrainConfig::default()
        };
        let out = train_model(Model::new(cfg, 1).unwrap(), &set, None, &tc).unwrap();
        let last = out.log.last().unwrap().train_mse;
        assert!(out.log[out.best_epoch].train_mse < 1e-6, "final {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let set = linear_data();
        let cfg = BackboneConfig::new(BackboneKind::ChannelAttention, 16, 4, 2).with_norm(NormKind::Acn);
        let tc = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_model(Model::new(cfg.clone(), 5).unwrap(), &set, Some(&set), &tc).unwrap();
        let b = train_model(Model::new(cfg, 5).unwrap(), &set, Some(&set), &tc).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
        assert!(a.log[0].wall_ms.is_none());
    }

    #[test]
    fn epoch_log_fields_in_order() {
        let line = EpochLog {
            epoch: 1,
            train_mse: 0.5,
            train_mae: 0.25,
            val_mse: None,
            val_mae: None,
            wall_ms: None,
        }
        .to_json_line();
        assert_eq!(
            line,
            r#"{"epoch":1,"train_mse":0.5,"train_mae":0.25,"val_mse":null,"val_mae":null,"wall_ms":null}"#
        );
    }
}
