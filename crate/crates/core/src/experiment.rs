//! End-to-end runs driven by an [`ExperimentConfig`]: data preparation,
//! training with artifacts on disk, norm comparisons and knob sweeps.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::Model;
use crate::checkpoint::save_model;
use crate::config::{DataSource, ExperimentConfig};
use crate::datasets::{
    chronological_split, gen_cid_toy, gen_sine_mixture, load_csv, make_windows, CidToySpec, RawSeries, SineMixtureSpec,
    WindowSet,
};
use crate::normlayers::NormKind;
use crate::training::{evaluate, train_model_with, EpochLog, Metrics, TrainOutcome};
use crate::{Error, Result};

/// Train/validation/test windows ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub channels: usize,
}

pub fn toy_spec(cfg: &ExperimentConfig) -> CidToySpec {
    CidToySpec {
        lookback: cfg.model.lookback,
        horizon: cfg.model.horizon,
        amplitude: cfg.toy_amplitude,
        periods: cfg.toy_periods,
        noise: cfg.toy_noise,
        seed: cfg.seed(),
    }
}

pub fn sine_spec(cfg: &ExperimentConfig) -> SineMixtureSpec {
    SineMixtureSpec {
        channels: cfg.sine_channels,
        length: cfg.sine_length,
        amplitude: 1.0,
        noise: cfg.sine_noise,
        seed: cfg.seed(),
    }
}

/// The full series the config points at.
pub fn load_series(cfg: &ExperimentConfig) -> Result<RawSeries> {
    match cfg.data {
        DataSource::Toy => gen_cid_toy(&toy_spec(cfg)),
        DataSource::Sine => gen_sine_mixture(&sine_spec(cfg)),
        DataSource::Csv => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| Error::Config("`data = csv` needs `data.path`".into()))?;
            load_csv(path, cfg.data_timestamp)
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let series = load_series(cfg)?;
    let (l, h) = (cfg.model.lookback, cfg.model.horizon);
    let (a, b, c) = chronological_split(&series, &cfg.split, l + h)?;
    Ok(Prepared {
        train: make_windows(&a, l, h, cfg.resolved_stride())?,
        val: make_windows(&b, l, h, cfg.resolved_eval_stride())?,
        test: make_windows(&c, l, h, cfg.resolved_eval_stride())?,
        channels: series.channels(),
    })
}

/// Model described by `cfg`, sized for `channels`.
pub fn build_model(cfg: &ExperimentConfig, channels: usize) -> Result<Model> {
    let mut mc = cfg.model.clone();
    mc.channels = channels;
    Model::new(mc, cfg.seed())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub norm: String,
    pub seed: u64,
    pub epoch0_train_mse: f64,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub test: Metrics,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub summary: RunSummary,
    pub prepared: Prepared,
}

/// Trains on prepared data and evaluates the restored best model on the test split.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    prepared: Prepared,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<RunResult> {
    let model = build_model(cfg, prepared.channels)?;
    let outcome = train_model_with(model, &prepared.train, Some(&prepared.val), &cfg.train, on_epoch)?;
    let test = evaluate(&outcome.model, &prepared.test)?;
    let summary = RunSummary {
        norm: cfg.model.norm.kind.to_string(),
        seed: cfg.seed(),
        epoch0_train_mse: outcome.log[0].train_mse,
        best_epoch: outcome.best_epoch,
        best_val_mse: outcome
            .log
            .iter()
            .find(|l| l.epoch == outcome.best_epoch)
            .and_then(|l| l.val_mse),
        test,
        stopped_early: outcome.stopped_early,
    };
    Ok(RunResult {
        outcome,
        summary,
        prepared,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_prepared(cfg, prepare(cfg)?, |_| Ok(()))
}

/// Paths of the artifacts `train_to_dir` writes.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            config: dir.join("config.txt"),
            log: dir.join("log.jsonl"),
            checkpoint: dir.join("model.ckpt"),
            summary: dir.join("summary.json"),
        }
    }
}

/// Trains and writes the resolved config, the JSON-lines log, the
/// checkpoint and a summary into `cfg.output`.
pub fn train_to_dir(cfg: &ExperimentConfig) -> Result<(RunResult, RunArtifacts)> {
    fs::create_dir_all(&cfg.output)?;
    let art = RunArtifacts::in_dir(&cfg.output);
    fs::write(&art.config, cfg.to_text())?;
    let prepared = prepare(cfg)?;
    let mut log = std::io::BufWriter::new(fs::File::create(&art.log)?);
    let result = run_prepared(cfg, prepared, |line| {
        writeln!(log, "{}", line.to_json_line())?;
        Ok(())
    })?;
    log.flush()?;
    save_model(&result.outcome.model, &art.checkpoint)?;
    fs::write(
        &art.summary,
        serde_json::to_string_pretty(&result.summary).expect("summary serializes"),
    )?;
    Ok((result, art))
}

/// Trains the same configuration once per norm kind.
pub fn compare(cfg: &ExperimentConfig, norms: &[NormKind]) -> Result<Vec<RunSummary>> {
    let prepared = prepare(cfg)?;
    norms
        .iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.model.norm.kind = kind;
            run_prepared(&c, prepared.clone(), |_| Ok(())).map(|r| r.summary)
        })
        .collect()
}

/// One grid point of a sweep: the overridden keys and the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub settings: Vec<(String, String)>,
    pub summary: RunSummary,
}

/// Cartesian product of `key -> values` axes, in the given axis order.
pub fn grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.into_iter()
            .flat_map(|point| {
                values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

/// Trains one grid point: `cfg` with `settings` applied.
pub fn sweep_point(cfg: &ExperimentConfig, settings: &[(String, String)]) -> Result<SweepPoint> {
    let mut c = cfg.clone();
    for (k, v) in settings {
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(SweepPoint {
        settings: settings.to_vec(),
        summary: run(&c)?.summary,
    })
}

/// Runs every grid point sequentially, in grid order.
pub fn sweep(cfg: &ExperimentConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<SweepPoint>> {
    grid(axes).iter().map(|s| sweep_point(cfg, s)).collect()
}

/// `(max − min) / mean` of the test MSE across sweep points.
pub fn relative_spread(points: &[SweepPoint]) -> f64 {
    let v: Vec<f64> = points.iter().map(|p| p.summary.test.mse).collect();
    if v.is_empty() {
        return 0.0;
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (max - min) / mean
}

const SUMMARY_HEADER: [&str; 7] = [
    "norm",
    "seed",
    "epoch0_train_mse",
    "best_epoch",
    "best_val_mse",
    "test_mse",
    "test_mae",
];

fn summary_cells(s: &RunSummary) -> Vec<String> {
    vec![
        s.norm.clone(),
        s.seed.to_string(),
        format!("{:.6}", s.epoch0_train_mse),
        s.best_epoch.to_string(),
        s.best_val_mse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
        format!("{:.6}", s.test.mse),
        format!("{:.6}", s.test.mae),
    ]
}

fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Results of `compare` as an aligned text table and as CSV.
pub fn summary_table(rows: &[RunSummary]) -> (String, String) {
    let header: Vec<String> = SUMMARY_HEADER.iter().map(|s| s.to_string()).collect();
    let cells: Vec<Vec<String>> = rows.iter().map(summary_cells).collect();
    (aligned(&header, &cells), csv_text(&header, &cells))
}

/// Results of `sweep`: one column per swept key, then the summary columns.
pub fn sweep_table(points: &[SweepPoint]) -> (String, String) {
    let keys: Vec<String> = points
        .first()
        .map(|p| p.settings.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let header: Vec<String> = keys
        .iter()
        .cloned()
        .chain(SUMMARY_HEADER.iter().map(|s| s.to_string()))
        .collect();
    let cells: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            p.settings
                .iter()
                .map(|(_, v)| v.clone())
                .chain(summary_cells(&p.summary))
                .collect()
        })
        .collect();
    (aligned(&header, &cells), csv_text(&header, &cells))
}
