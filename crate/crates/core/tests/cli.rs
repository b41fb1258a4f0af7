use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use micfer::codec::{parse_raw, write_raw, RawFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn micfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micfer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = micfer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails_with(args: &[&str], needle: &str) {
    let out = micfer(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "{args:?}: {err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_sequence(seed: u64) -> Vec<RawFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..5)
        .map(|_| RawFrame::new(16, 24, 3, (0..16 * 24 * 3).map(|_| rng.random()).collect()).unwrap())
        .collect()
}

#[test]
fn encode_then_decode_every_frame() {
    let tmp = TempDir::new().unwrap();
    let raw = tmp.path().join("seq.rraw");
    let gop = tmp.path().join("seq.rgop");
    let frames = random_sequence(1);
    write_raw(&frames, &mut fs::File::create(&raw).unwrap()).unwrap();
    ok(&["encode", "--input", p(&raw), "--output", p(&gop), "--mb", "8", "--search", "2"]);
    for (t, want) in frames.iter().enumerate() {
        let one = tmp.path().join(format!("f{t}.rraw"));
        ok(&["decode", "--input", p(&gop), "--frame", &t.to_string(), "--output", p(&one)]);
        assert_eq!(parse_raw(&fs::read(&one).unwrap()).unwrap(), vec![want.clone()]);
    }
    fails_with(
        &["decode", "--input", p(&gop), "--frame", "5", "--output", p(&raw)],
        "error:",
    );
}

#[test]
fn diagnostics_for_bad_invocations() {
    let tmp = TempDir::new().unwrap();
    fails_with(&["encode", "--input", "/nonexistent/x.rraw", "--output", "y"], "cannot open");
    fails_with(&["mi-bench", "--rho", "0.5", "--bogus", "1"], "--bogus");
    fails_with(&["mi-bench", "--rho", "1.5"], "--rho");
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "alpha = 0.1\nlearning_rate = 3\n").unwrap();
    let out = micfer(&[
        "train", "--config", p(&cfg), "--data", p(tmp.path()), "--id-ckpt", "x", "--out", "y",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("learning_rate"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn mi_bench_on_independent_gaussians() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("bench.csv");
    ok(&[
        "mi-bench", "--rho", "0.0", "--dim", "1", "--steps", "2000", "--batch", "512", "--seed", "1", "--out", p(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,estimate,joint_term,marginal_log_term"));
    let est: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(est.len(), 2000);
    let tail = &est[1800..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean.abs() <= 0.05, "{mean}");
}

#[test]
fn pipeline_runs_and_repeats_byte_for_byte() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen-data", "--identities", "8", "--classes", "2", "--per-cell", "4", "--length", "4", "--out", p(&data),
        "--seed", "7",
    ]);
    let id = tmp.path().join("id.micm");
    ok(&["pretrain-id", "--data", p(&data), "--out", p(&id), "--epochs", "30"]);
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 2\nbatch_size = 4\nd_e = 8\nstat_hidden = 8\nval_fraction = 0.25\n").unwrap();

    let mut reports = Vec::new();
    for run in 0..2 {
        let model = tmp.path().join(format!("m{run}.micm"));
        let metrics = tmp.path().join(format!("m{run}.csv"));
        let report = tmp.path().join(format!("r{run}.json"));
        ok(&[
            "train", "--config", p(&cfg), "--data", p(&data), "--id-ckpt", p(&id), "--out", p(&model), "--metrics",
            p(&metrics),
        ]);
        ok(&[
            "eval", "--model", p(&model), "--data", p(&data), "--split", "all", "--report", p(&report), "--mi-steps",
            "50",
        ]);
        let probe = ok(&["probe-id", "--model", p(&model), "--data", p(&data), "--epochs", "20"]);
        reports.push((
            fs::read(&model).unwrap(),
            fs::read(&metrics).unwrap(),
            fs::read(&report).unwrap(),
            probe.stdout,
        ));
    }
    assert_eq!(reports[0], reports[1]);
    let metrics = String::from_utf8(reports[0].1.clone()).unwrap();
    assert!(metrics.starts_with("epoch,loss_ce,mi_hat,loss_recon,train_acc,val_acc\n"));
    assert_eq!(metrics.lines().count(), 3);
    let report: serde_json::Value = serde_json::from_slice(&reports[0].2).unwrap();
    assert_eq!(report["n_sequences"], 64);
    assert!(report.get("fps").is_none());
}
