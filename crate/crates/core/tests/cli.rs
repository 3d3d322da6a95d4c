//! End-to-end runs of the command-line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn haseparator(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haseparator"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = haseparator(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--steps",
    "60",
    "--hidden",
    "16",
    "--embed-dim",
    "8",
    "--max-pairs",
    "5000",
];

#[test]
fn train_then_eval_reproduces_test_scores() {
    let dir = tempfile::tempdir().unwrap();
    let train_out = dir.path().join("train");
    let eval_out = dir.path().join("eval");
    let mut args = vec![
        "train",
        "--loss",
        "haseparator",
        "--sigma",
        "4",
        "--margin",
        "0.5",
    ];
    args.extend(SMALL);
    args.extend(["--out", path(&train_out)]);
    ok(&args);

    for file in [
        "config.txt",
        "report.csv",
        "checkpoint.txt",
        "scores_test.json",
        "hist_test.csv",
        "embeddings_test.csv",
    ] {
        assert!(train_out.join(file).is_file(), "missing {file}");
    }

    // The saved config describes the data; the checkpoint holds the model.
    let config = train_out.join("config.txt");
    let checkpoint = train_out.join("checkpoint.txt");
    ok(&[
        "eval",
        "--config",
        path(&config),
        "--checkpoint",
        path(&checkpoint),
        "--out",
        path(&eval_out),
    ]);
    let trained = fs::read(train_out.join("scores_test.json")).unwrap();
    let evaluated = fs::read(eval_out.join("scores_test.json")).unwrap();
    assert_eq!(trained, evaluated);
    assert!(eval_out.join("scores_train.json").is_file());

    // The separator cost was tracked and is not identically zero.
    let report = fs::read_to_string(train_out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("step,lr,c_all,c_ce,c_sep,train_acc"));
    let c_sep: Vec<f64> = lines
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(c_sep.len(), 60);
    assert!(c_sep.iter().any(|&v| v > 0.0));
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep",
        "--losses",
        "haseparator,arcface,softmax",
        "--sigmas",
        "2,4",
        "--margins",
        "0.3,0.6",
        "--seeds",
        "0",
        "--jobs",
        "2",
        "--out",
        path(dir.path()),
    ];
    args.extend(SMALL);
    ok(&args);
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("loss,sigma,margin,seed,test_acc,d_kl,d_em,c_t,wall_time_s,error")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 2 * 2);
    for row in &rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 10);
        assert!(fields[9].is_empty(), "run failed: {row}");
        let c_t: f64 = fields[7].parse().unwrap();
        if fields[0] == "haseparator" {
            assert!(c_t >= 0.0);
        } else {
            assert_eq!(c_t, 0.0);
        }
    }
}

#[test]
fn unknown_loss_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = haseparator(&["train", "--loss", "cosface", "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cosface"));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("broken.txt");
    fs::write(&checkpoint, "haseparator-checkpoint 1\ndims 16 x\n").unwrap();
    let out = haseparator(&[
        "eval",
        "--checkpoint",
        path(&checkpoint),
        "--out",
        path(&dir.path().join("eval")),
    ]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn file_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("points.csv");
    let mut text = String::from("x,y,label\n");
    for i in 0..60 {
        let class = i % 3;
        let angle = class as f64 * 2.1 + (i as f64 * 0.37).sin() * 0.2;
        text.push_str(&format!(
            "{},{},{class}\n",
            3.0 * angle.cos(),
            3.0 * angle.sin()
        ));
    }
    fs::write(&data, text).unwrap();
    let dataset = format!("file:{}", path(&data));
    ok(&[
        "train",
        "--dataset",
        &dataset,
        "--label-column",
        "2",
        "--skip-header",
        "--loss",
        "softmax",
        "--steps",
        "50",
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert!(dir.path().join("run/scores_test.json").is_file());
}
