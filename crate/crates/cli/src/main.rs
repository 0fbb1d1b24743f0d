//! `chanorm` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chanorm::backbones::Model;
use chanorm::checkpoint::load_model;
use chanorm::config::ExperimentConfig;
use chanorm::datasets::write_csv;
use chanorm::diagnostics::{
    cid_test, diagnose, perturb_channel_scale, DiagnosticsOptions, DEFAULT_TOL_EQ, DEFAULT_TOL_NEQ,
};
use chanorm::experiment::{
    build_model, compare, load_series, prepare, run_prepared, summary_table, sweep_point, sweep_table, train_to_dir,
    SweepPoint,
};
use chanorm::normlayers::NormKind;
use chanorm::training::{
    adam_step, evaluate, grad_check_layer, grad_check_model, mse_gradient, AdamConfig, GradCheckOptions,
    GradCheckReport, OptimizerState,
};
use chanorm::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "chanorm",
    version,
    about = "Channel normalization experiments for multivariate forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Data source: toy, sine or csv.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series and write it as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Destination file (default: <output>/series.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes config, JSONL log, checkpoint and summary.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (default: <output>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Channel-identifiability test of an untrained or saved model.
    CidTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        norm: Option<String>,
        /// Channel identifier: none, learnable or fixed_constant.
        #[arg(long)]
        identifier: Option<String>,
        /// Scale the channel-0 parameter rows of every channel norm by 1 + DELTA.
        #[arg(long, value_name = "DELTA")]
        perturb: Option<f64>,
        /// Adam steps on the training split before testing.
        #[arg(long, default_value_t = 0)]
        train_steps: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Entropy, correlation and head-divergence diagnostics.
    Entropy {
        #[command(flatten)]
        common: Common,
        /// Use a saved model instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also train the same model with this norm for comparison.
        #[arg(long)]
        baseline_norm: Option<String>,
    },
    /// Finite-difference gradient check of a norm layer or a full model.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Norm layer to check: ln, in, cn, acn or pcn.
        #[arg(long)]
        layer: Option<String>,
        /// Check the full model described by the config instead.
        #[arg(long, conflicts_with = "layer")]
        model: bool,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates sampled per parameter bank.
        #[arg(long, default_value_t = 200)]
        max_coords: usize,
    },
    /// Train the same backbone under several norms and tabulate the results.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "ln,cn,acn,pcn")]
        norms: Vec<String>,
    },
    /// Train over a grid of config values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid axis `KEY=V1,V2,...`; repeatable.
        #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
        grid: Vec<String>,
        /// Run grid points concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

enum Outcome {
    Ok,
    Failed,
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.set("data", d)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    cfg.apply_overrides(&common.sets)?;
    cfg.validate()?;
    println!("seed: {}", cfg.seed());
    Ok(cfg)
}

fn write_config(cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output)?;
    let path = cfg.output.join("config.txt");
    fs::write(&path, cfg.to_text())?;
    Ok(path)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("json value serializes"),
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Synth { common, out } => synth(&common, out),
        Command::Train { common } => train(&common),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => eval(&common, checkpoint, split),
        Command::CidTest {
            common,
            backbone,
            norm,
            identifier,
            perturb,
            train_steps,
            checkpoint,
        } => {
            let mut common = common;
            for (key, v) in [
                ("model.backbone", backbone),
                ("norm.kind", norm),
                ("model.identifier", identifier),
            ] {
                if let Some(v) = v {
                    common.sets.insert(0, format!("{key}={v}"));
                }
            }
            cid(&common, perturb, train_steps, checkpoint)
        }
        Command::Entropy {
            common,
            checkpoint,
            baseline_norm,
        } => entropy(&common, checkpoint, baseline_norm),
        Command::GradCheck {
            common,
            layer,
            model,
            tol,
            max_coords,
        } => {
            let mut common = common;
            if let Some(l) = layer {
                common.sets.insert(0, format!("norm.kind={l}"));
            }
            grad_check(&common, model, tol, max_coords)
        }
        Command::Compare { common, norms } => compare_cmd(&common, &norms),
        Command::Sweep { common, grid, parallel } => sweep_cmd(&common, &grid, parallel),
    }
}

fn synth(common: &Common, out: Option<PathBuf>) -> Result<Outcome> {
    let cfg = resolve(common)?;
    write_config(&cfg)?;
    let series = load_series(&cfg)?;
    let out = out.unwrap_or_else(|| cfg.output.join("series.csv"));
    write_csv(&series, &out)?;
    println!(
        "wrote {} rows x {} channels to {}",
        series.len(),
        series.channels(),
        out.display()
    );
    Ok(Outcome::Ok)
}

fn train(common: &Common) -> Result<Outcome> {
    let cfg = resolve(common)?;
    let (result, art) = train_to_dir(&cfg)?;
    let s = &result.summary;
    println!(
        "best epoch {} | test mse {:.6} mae {:.6}",
        s.best_epoch, s.test.mse, s.test.mae
    );
    println!("artifacts in {}", cfg.output.display());
    println!("log: {}", art.log.display());
    Ok(Outcome::Ok)
}

fn eval(common: &Common, checkpoint: Option<PathBuf>, split: Split) -> Result<Outcome> {
    let mut cfg = resolve(common)?;
    let path = checkpoint.unwrap_or_else(|| cfg.output.join("model.ckpt"));
    let model = load_model(&path)?;
    cfg.model.lookback = model.config.lookback;
    cfg.model.horizon = model.config.horizon;
    let p = prepare(&cfg)?;
    let (name, set) = match split {
        Split::Train => ("train", &p.train),
        Split::Val => ("val", &p.val),
        Split::Test => ("test", &p.test),
    };
    let m = evaluate(&model, set)?;
    println!("{name}: mse {:.6} mae {:.6} ({} windows)", m.mse, m.mae, set.len());
    write_config(&cfg)?;
    write_json(
        &cfg.output.join("eval.json"),
        &serde_json::json!({ "checkpoint": path.display().to_string(), "split": name, "mse": m.mse, "mae": m.mae }),
    )?;
    Ok(Outcome::Ok)
}

fn cid(common: &Common, perturb: Option<f64>, train_steps: usize, checkpoint: Option<PathBuf>) -> Result<Outcome> {
    let cfg = resolve(common)?;
    let mut model = match &checkpoint {
        Some(p) => load_model(p)?,
        None => build_model(&cfg, load_series(&cfg)?.channels())?,
    };
    if train_steps > 0 {
        let mut c = cfg.clone();
        c.model.lookback = model.config.lookback;
        c.model.horizon = model.config.horizon;
        let p = prepare(&c)?;
        let batch = p.train.slice(0, p.train.len().min(cfg.train.batch_size));
        let mut state = OptimizerState::new(
            &model.params,
            AdamConfig {
                lr: cfg.train.learning_rate,
                ..AdamConfig::default()
            },
        );
        for _ in 0..train_steps {
            let (_, grads) = mse_gradient(&model, &batch)?;
            adam_step(&mut model.params, &grads, &mut state)?;
        }
    }
    if let Some(delta) = perturb {
        let n = perturb_channel_scale(&mut model, 0, delta);
        println!("perturbed channel 0 in {n} norm layer(s)");
    }
    let r = cid_test(&model, cfg.seed(), DEFAULT_TOL_EQ, DEFAULT_TOL_NEQ)?;
    println!("{}", r.verdict);
    println!("max channel gap {:e}", r.max_gap);
    write_config(&cfg)?;
    write_json(
        &cfg.output.join("cid.json"),
        &serde_json::json!({
            "verdict": r.verdict.to_string(),
            "max_gap": r.max_gap,
            "perturb": perturb,
            "train_steps": train_steps,
            "checkpoint": checkpoint.map(|p| p.display().to_string()),
        }),
    )?;
    Ok(Outcome::Ok)
}

fn entropy(common: &Common, checkpoint: Option<PathBuf>, baseline_norm: Option<String>) -> Result<Outcome> {
    let cfg = resolve(common)?;
    write_config(&cfg)?;
    let prepared = prepare(&cfg)?;
    let subject = match &checkpoint {
        Some(p) => load_model(p)?,
        None => run_prepared(&cfg, prepared.clone(), |_| Ok(()))?.outcome.model,
    };
    let baseline: Option<Model> = match &baseline_norm {
        Some(kind) => {
            let mut c = cfg.clone();
            c.model.norm.kind = kind.parse::<NormKind>()?;
            Some(run_prepared(&c, prepared.clone(), |_| Ok(()))?.outcome.model)
        }
        None => None,
    };
    let opts = DiagnosticsOptions {
        seed: cfg.seed(),
        ..DiagnosticsOptions::default()
    };
    let report = diagnose(&subject, baseline.as_ref(), &prepared.test.inputs, &opts)?;
    let e = &report.entropy;
    println!(
        "norm {}: feature entropy {:.6} channel entropy {:.6}",
        report.norm, e.feature_entropy, e.channel_entropy
    );
    if let (Some(b), Some(kind)) = (&report.baseline_entropy, &baseline_norm) {
        println!(
            "norm {kind}: feature entropy {:.6} channel entropy {:.6}",
            b.feature_entropy, b.channel_entropy
        );
    }
    println!("cid: {}", report.cid.verdict);
    println!("correlation off-diagonal std {:.6}", report.correlation.offdiag_std);
    if !report.head_kld.is_empty() {
        let kld: Vec<String> = report.head_kld.iter().map(|v| format!("{v:.6}")).collect();
        println!("head divergence per layer: {}", kld.join(", "));
    }
    fs::write(cfg.output.join("diagnostics.json"), report.to_json())?;
    report.write_correlation_csv(cfg.output.join("correlation.csv"))?;
    report.write_histogram_csv(cfg.output.join("correlation_hist.csv"))?;
    println!("report in {}", cfg.output.display());
    Ok(Outcome::Ok)
}

fn grad_check(common: &Common, model: bool, tol: f64, max_coords: usize) -> Result<Outcome> {
    let cfg = resolve(common)?;
    let opts = GradCheckOptions {
        tol,
        max_coords,
        seed: cfg.seed(),
        ..GradCheckOptions::default()
    };
    let report: GradCheckReport = if model {
        let mut m = cfg.model.clone();
        m.channels = load_series(&cfg)?.channels();
        grad_check_model(&m, 2, &opts)?
    } else {
        grad_check_layer(&cfg.model.norm, (3, 4, 5, 6), &opts)?
    };
    let what = if model { "model" } else { "layer" };
    println!(
        "{what} {}: max relative error {:.3e} over {} coordinates (tol {:.0e})",
        cfg.model.norm.kind, report.max_rel_err, report.checked, report.tol
    );
    for f in report.failures.iter().take(10) {
        println!(
            "  fail {}[{}]: analytic {:e} numeric {:e}",
            f.bank, f.index, f.analytic, f.numeric
        );
    }
    write_config(&cfg)?;
    fs::write(
        cfg.output.join("grad_check.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    if report.passed() {
        println!("PASS");
        Ok(Outcome::Ok)
    } else {
        eprintln!("gradient check failed");
        Ok(Outcome::Failed)
    }
}

fn compare_cmd(common: &Common, norms: &[String]) -> Result<Outcome> {
    let cfg = resolve(common)?;
    let kinds = norms
        .iter()
        .map(|n| n.trim().parse::<NormKind>())
        .collect::<Result<Vec<_>>>()?;
    write_config(&cfg)?;
    let rows = compare(&cfg, &kinds)?;
    let (text, csv) = summary_table(&rows);
    print!("{text}");
    fs::write(cfg.output.join("compare.txt"), &text)?;
    fs::write(cfg.output.join("compare.csv"), &csv)?;
    Ok(Outcome::Ok)
}

fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid axis `{spec}` is not KEY=V1,V2")))?;
    let values: Vec<String> = v
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid axis `{k}` has no values")));
    }
    Ok((k.trim().to_string(), values))
}

fn sweep_cmd(common: &Common, grid: &[String], parallel: bool) -> Result<Outcome> {
    let cfg = resolve(common)?;
    let axes = grid.iter().map(|g| parse_axis(g)).collect::<Result<Vec<_>>>()?;
    write_config(&cfg)?;
    let points = chanorm::experiment::grid(&axes);
    let dir = cfg.output.join("sweep");
    fs::create_dir_all(&dir)?;
    let run_one = |i: usize, settings: &Vec<(String, String)>| -> Result<SweepPoint> {
        let point = sweep_point(&cfg, settings)?;
        fs::write(
            dir.join(format!("point-{i:03}.json")),
            serde_json::to_string_pretty(&point).expect("point serializes"),
        )?;
        Ok(point)
    };
    let results: Vec<SweepPoint> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let run_one = &run_one;
                    s.spawn(move || run_one(i, p))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| run_one(i, p))
            .collect::<Result<Vec<_>>>()?
    };
    let (text, csv) = sweep_table(&results);
    print!("{text}");
    println!(
        "relative spread of test mse: {:.4}",
        chanorm::experiment::relative_spread(&results)
    );
    fs::write(cfg.output.join("sweep.txt"), &text)?;
    fs::write(cfg.output.join("sweep.csv"), &csv)?;
    Ok(Outcome::Ok)
}
