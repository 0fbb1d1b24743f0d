use std::path::Path;
use std::process::{Command, Output};

fn chanorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanorm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

const SMALL: [&str; 10] = [
    "--set",
    "model.lookback=12",
    "--set",
    "model.horizon=4",
    "--set",
    "model.d_model=8",
    "--set",
    "model.ffn_hidden=16",
    "--set",
    "train.epochs=3",
];

#[test]
fn cid_test_baseline_is_non_cid() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanorm(&[
        "cid-test",
        "--backbone",
        "channel_attention",
        "--norm",
        "ln",
        "--output",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.contains("seed: 7"));
    assert!(s.lines().any(|l| l == "NON_CID"), "{s}");
    assert!(dir.path().join("config.txt").exists());
}

#[test]
fn cid_test_perturbed_cn_is_cid() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanorm(&[
        "cid-test",
        "--norm",
        "cn",
        "--perturb",
        "0.1",
        "--output",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l == "CID"));
}

#[test]
fn grad_check_layer_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanorm(&["grad-check", "--layer", "acn", "--output", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let s = stdout(&o);
    assert!(s.contains("max relative error"));
    assert!(s.contains("PASS"));
}

#[test]
fn grad_check_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanorm(&[
        "grad-check",
        "--layer",
        "ln",
        "--tol",
        "0",
        "--output",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert_eq!(
        chanorm(&["train", "--set", "no.such.key=1", "--output", &out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        chanorm(&["train", "--set", "norm.kind=bogus", "--output", &out])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(chanorm(&["not-a-command"]).status.code(), Some(1));
    let missing = dir.path().join("missing.csv");
    let o = chanorm(&[
        "train",
        "--data",
        "csv",
        "--set",
        &format!("data.path={}", missing.display()),
        "--output",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3,oops\n").unwrap();
    let o = chanorm(&[
        "synth",
        "--data",
        "csv",
        "--set",
        &format!("data.path={}", bad.display()),
        "--output",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = chanorm(&[
        "train",
        "--set",
        "train.lr=1e300",
        "--set",
        "train.epochs=2",
        "--output",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_eval_and_reproduce_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let mut args = vec!["train", "--output"];
    let a_str = out_arg(&a);
    args.push(&a_str);
    args.extend_from_slice(&SMALL);
    let o = chanorm(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "log.jsonl", "model.ckpt", "summary.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(a.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let cfg = a.join("config.txt");
    let o = chanorm(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("seed: 7\ntest: mse "));

    let b = dir.path().join("b");
    let o = chanorm(&["train", "--config", cfg.to_str().unwrap(), "--output", &out_arg(&b)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(a.join("log.jsonl")).unwrap(),
        std::fs::read(b.join("log.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(b.join("model.ckpt")).unwrap()
    );
}

#[test]
fn compare_reports_equal_epoch0_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let mut args = vec!["compare", "--norms", "ln,cn,acn,pcn", "--output", &out];
    args.extend_from_slice(&SMALL);
    let o = chanorm(&args);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[2] == rows[0][2]), "{csv}");
    assert!(std::fs::read_to_string(dir.path().join("compare.txt"))
        .unwrap()
        .starts_with("norm"));
}

#[test]
fn sweep_parallel_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str, parallel: bool| {
        let out = out_arg(&dir.path().join(sub));
        let mut args = vec![
            "sweep",
            "--set",
            "norm.kind=acn",
            "--grid",
            "norm.tau=0.1,0.5",
            "--output",
            &out,
        ];
        args.extend_from_slice(&SMALL);
        if parallel {
            args.push("--parallel");
        }
        let o = chanorm(&args);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read_to_string(dir.path().join(sub).join("sweep.csv")).unwrap()
    };
    let seq = run("seq", false);
    assert_eq!(seq.lines().count(), 3);
    assert_eq!(seq, run("par", true));
}

#[test]
fn synth_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = chanorm(&["synth", "--data", "toy", "--output", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("up,down"));
    assert_eq!(text.lines().count(), 1 + 40 * 120);
}

#[test]
fn entropy_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let mut args = vec![
        "entropy",
        "--data",
        "sine",
        "--set",
        "norm.kind=cn",
        "--baseline-norm",
        "ln",
        "--set",
        "stride=8",
        "--output",
        &out,
    ];
    args.extend_from_slice(&SMALL);
    let o = chanorm(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagnostics.json")).unwrap()).unwrap();
    assert!(report["entropy"]["channel_entropy"].is_number());
    assert!(report["baseline_entropy"]["channel_entropy"].is_number());
    assert!(dir.path().join("correlation.csv").exists());
    assert!(dir.path().join("correlation_hist.csv").exists());
}

#[test]
fn logs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let mut args = vec!["train", "--set", "norm.kind=acn", "--set", "stride=1", "--output"];
        let out_s = out_arg(&out);
        args.push(&out_s);
        args.extend_from_slice(&SMALL);
        let o = Command::new(env!("CARGO_BIN_EXE_chanorm"))
            .args(&args)
            .env("CHANORM_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        logs.push(std::fs::read(out.join("log.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}
