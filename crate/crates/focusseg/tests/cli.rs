//! End-to-end checks of the command-line interface: flag grammar, exit
//! codes, reproducible outputs, and the on-disk formats.

use std::path::Path;
use std::process::{Command, Output};

fn focusseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focusseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn unknown_flags_are_rejected_with_usage_exit_code() {
    let out = focusseg(&["gen-data", "--bogus-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_rejected() {
    let out = focusseg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_pairs_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for target in [&a, &b] {
        let out = focusseg(&[
            "gen-data",
            "--seed",
            "7",
            "--count",
            "4",
            "--size",
            "32x32",
            "--classes",
            "5",
            "--out-dir",
            target.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("# resolved config"));
    }
    for name in [
        "manifest.tsv",
        "generator.toml",
        "scene_0000.ppm",
        "scene_0003_labels.pgm",
    ] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs between identical runs");
    }
    // Manifest grammar: image TAB label per non-comment line.
    let manifest = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let pairs: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(pairs.len(), 4);
    for line in pairs {
        assert_eq!(line.split('\t').count(), 2);
    }
}

#[test]
fn gen_data_rejects_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = focusseg(&[
        "gen-data",
        "--classes",
        "2",
        "--out-dir",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn tiny_config(path: &Path) {
    std::fs::write(
        path,
        r#"
[model]
num_classes = 3
input_size = [16, 16]
encoder_channels = [2, 3, 4]
head_channels = 4
decoder_lowlevel_channels = 2

[train]
epochs = 1
train_scenes = 4
val_scenes = 2
"#,
    )
    .unwrap();
}

#[test]
fn gradcheck_passes_on_tiny_config_and_echoes_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    tiny_config(&cfg);
    let out = focusseg(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--tol",
        "1e-4",
        "--seed",
        "7",
        "--max-coords",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("# resolved config"));
    // Every parameter group is named in the report.
    for group in ["encoder.stem.weight", "selector.proj.weight", "branch3.conv.weight", "decoder.classifier.bias"] {
        assert!(text.contains(group), "missing {group} in report:\n{text}");
    }
    assert!(text.contains("PASS"));
}

#[test]
fn gradcheck_tampered_gradients_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    tiny_config(&cfg);
    let out = focusseg(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--max-coords",
        "2",
        "--tamper-grad",
        "0.05",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn train_eval_predict_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    tiny_config(&cfg);
    let runs = dir.path().join("runs");

    let out = focusseg(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("# resolved config"));
    assert!(text.contains("mIoU"));
    let ckpt = runs.join("ckpt_final.ckpt");
    assert!(ckpt.exists());
    assert!(runs.join("train_log.tsv").exists());
    assert!(runs.join("metrics.toml").exists());

    // Log grammar: iter TAB lr TAB four losses.
    let log = std::fs::read_to_string(runs.join("train_log.tsv")).unwrap();
    for line in log.lines().filter(|l| !l.starts_with('#')) {
        assert_eq!(line.split('\t').count(), 6, "bad log line {line:?}");
    }

    // A dataset to evaluate and predict on.
    let data = dir.path().join("data");
    let out = focusseg(&[
        "gen-data",
        "--seed",
        "3",
        "--count",
        "2",
        "--size",
        "16x16",
        "--classes",
        "3",
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    let out = focusseg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("mIoU"));
    assert!(stdout(&out).contains("# structured"));

    let preds = dir.path().join("preds");
    let out = focusseg(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("metrics:"));
    assert!(preds.join("pred_0000.pgm").exists());
    assert!(preds.join("pred_0001.pgm").exists());

    // Single-image prediction without ground truth: no metrics line.
    let out = focusseg(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data.join("scene_0000.ppm").to_str().unwrap(),
        "--out-dir",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!stdout(&out).contains("metrics:"));
    assert!(preds.join("scene_0000_pred.pgm").exists());
}

#[test]
fn train_is_reproducible_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    tiny_config(&cfg);
    let mut bytes = Vec::new();
    for name in ["r1", "r2"] {
        let runs = dir.path().join(name);
        let out = focusseg(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--out-dir",
            runs.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        bytes.push((
            std::fs::read(runs.join("train_log.tsv")).unwrap(),
            std::fs::read(runs.join("ckpt_final.ckpt")).unwrap(),
        ));
    }
    assert_eq!(bytes[0].0, bytes[1].0, "logs differ");
    assert_eq!(bytes[0].1, bytes[1].1, "checkpoints differ");
}

#[test]
fn bench_reports_branch_table() {
    let out = focusseg(&["bench", "--channels", "4", "--spatial", "20x20", "--trials", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("dense_flops"));
    assert!(text.contains("# structured"));
    assert!(text.contains("[[branch]]"));
    assert!(text.contains("# model flops"));
}

#[test]
fn ablate_dilation_emits_one_row_per_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    tiny_config(&cfg);
    let out = focusseg(&[
        "ablate-dilation",
        "--config",
        cfg.to_str().unwrap(),
        "--rates",
        "1,16",
        "--epochs",
        "1",
        "--train-scenes",
        "4",
        "--val-scenes",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("dilation"));
    // Receptive-field spans for rates 1 and 16 on the 7x7 branch.
    assert!(text.contains('7'));
    assert!(text.contains("97"));
    assert!(text.contains("[[ablation]]"));
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("[[ablation]]")).collect();
    assert_eq!(rows.len(), 2);
}

#[test]
fn ablate_single_rate_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    tiny_config(&cfg);
    let out = focusseg(&[
        "ablate-dilation",
        "--config",
        cfg.to_str().unwrap(),
        "--rates",
        "4",
        "--epochs",
        "1",
        "--train-scenes",
        "4",
        "--val-scenes",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("[[ablation]]")).collect();
    assert_eq!(rows.len(), 1);
}
