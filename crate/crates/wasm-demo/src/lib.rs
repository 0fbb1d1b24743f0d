//! Browser bindings for three small interactive operations. Every function
//! returns a JSON string so the page needs no generated type glue.

use chanorm::config::ExperimentConfig;
use chanorm::datasets::{gen_sine_mixture, SineMixtureSpec};
use chanorm::diagnostics::{cid_test, perturb_channel_scale};
use chanorm::experiment::{prepare, run_prepared};
use chanorm::normlayers::{channel_similarity, SimMetric};
use chanorm::training::predict_all;
use chanorm::{Result, Tensor};
use serde_json::json;
use wasm_bindgen::prelude::*;

const TOY_CONFIG: &str = include_str!("../../../configs/toy_cid.txt");

/// Channel-to-channel similarity weights for the first window of a seeded
/// sine mixture. Returns `{"channels": C, "weights": [[..]; C], "window": [[..]; C]}`.
pub fn similarity_json(channels: usize, window: usize, tau: f64, metric: &str, seed: u64) -> Result<String> {
    let metric: SimMetric = metric.parse()?;
    let window = window.max(2);
    let series = gen_sine_mixture(&SineMixtureSpec::new(channels, window, seed))?;
    let cols: Vec<Vec<f64>> = (0..channels).map(|c| series.column(c)).collect();
    let basis = Tensor::new(&[1, channels, window], cols.concat())?;
    let s = channel_similarity(&basis, tau, metric)?;
    let weights: Vec<&[f64]> = s.weights.data().chunks(channels).collect();
    Ok(json!({ "channels": channels, "weights": weights, "window": cols }).to_string())
}

/// Trains the two-channel toy with the given norm and returns the loss curve,
/// the test error, the shared-prediction bound and one test forecast.
pub fn toy_json(norm: &str, epochs: usize, seed: u64) -> Result<String> {
    let mut cfg = ExperimentConfig::from_text(TOY_CONFIG)?;
    cfg.apply_overrides(&[
        format!("norm.kind={norm}"),
        format!("train.epochs={epochs}"),
        format!("seed={seed}"),
    ])?;
    cfg.validate()?;
    let bound = chanorm::experiment::toy_spec(&cfg).shared_prediction_bound();
    let res = run_prepared(&cfg, prepare(&cfg)?, |_| Ok(()))?;
    let test = &res.prepared.test;
    let pred = predict_all(&res.outcome.model, &test.inputs.slice(0, 1))?;
    let curve: Vec<f64> = res.outcome.log.iter().map(|l| l.train_mse).collect();
    Ok(json!({
        "norm": norm,
        "train_mse": curve,
        "test_mse": res.summary.test.mse,
        "bound": bound,
        "forecast": [pred.channel(0, 0), pred.channel(0, 1)],
        "target": [test.targets.channel(0, 0), test.targets.channel(0, 1)],
    })
    .to_string())
}

/// Runs the duplicated-channel test on a freshly initialized model, after
/// adding `delta` to channel 0's scale row in every CN layer.
pub fn cid_json(norm: &str, identifier: &str, delta: f64, seed: u64) -> Result<String> {
    let mut cfg = ExperimentConfig::from_text(TOY_CONFIG)?;
    cfg.apply_overrides(&[
        format!("norm.kind={norm}"),
        format!("model.identifier={identifier}"),
        format!("seed={seed}"),
        "model.lookback=24".to_string(),
        "model.horizon=6".to_string(),
    ])?;
    cfg.validate()?;
    let mut model = chanorm::experiment::build_model(&cfg, 2)?;
    let touched = perturb_channel_scale(&mut model, 0, delta);
    let r = cid_test(&model, seed, 1e-9, 1e-6)?;
    Ok(json!({ "verdict": r.verdict.to_string(), "max_gap": r.max_gap, "layers_perturbed": touched }).to_string())
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn similarity(
    channels: usize,
    window: usize,
    tau: f64,
    metric: &str,
    seed: u64,
) -> std::result::Result<String, JsError> {
    js(similarity_json(channels, window, tau, metric, seed))
}

#[wasm_bindgen]
pub fn train_toy(norm: &str, epochs: usize, seed: u64) -> std::result::Result<String, JsError> {
    js(toy_json(norm, epochs, seed))
}

#[wasm_bindgen]
pub fn cid(norm: &str, identifier: &str, delta: f64, seed: u64) -> std::result::Result<String, JsError> {
    js(cid_json(norm, identifier, delta, seed))
}
