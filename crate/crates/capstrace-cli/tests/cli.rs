//! End-to-end checks of the installed binary: every subcommand, the exit
//! code contract, and byte-level reproducibility of generated artifacts.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_capstrace"));
    c.env("CAPSTRACE_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_success(o: &Output, what: &str) {
    assert!(
        o.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn gen_shapes(dir: &Path, count: usize, seed: u64) {
    let o = run(&[
        "gen-data",
        "--kind",
        "synthetic-shapes",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--height",
        "8",
        "--width",
        "12",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_success(&o, "gen-data synthetic-shapes");
}

#[test]
fn gen_data_synthetic_shapes_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_shapes(&d1, 30, 7);
    gen_shapes(&d2, 30, 7);
    for name in ["train.cten", "val.cten", "test.cten"] {
        let a = std::fs::read(d1.join(name)).unwrap();
        let b = std::fs::read(d2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between same-seed runs");
        assert!(!a.is_empty());
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["num_classes"], 2);
    assert_eq!(m["train_items"].as_u64().unwrap(), 24);
}

#[test]
fn gen_data_noisy_mnist_missing_idx_exits_2_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ds");
    let o = run(&[
        "gen-data",
        "--kind",
        "noisy-mnist",
        "--images",
        tmp.path().join("nope-images").to_str().unwrap(),
        "--labels",
        tmp.path().join("nope-labels").to_str().unwrap(),
        "--digits",
        "0,8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists(), "failed generation must leave no partial output");
}

#[test]
fn synthetic_digits_feed_the_noisy_mnist_path() {
    let tmp = tempfile::tempdir().unwrap();
    let digits_dir = tmp.path().join("digits");
    let o = run(&[
        "gen-data",
        "--kind",
        "synthetic-digits",
        "--digits",
        "0,8",
        "--count",
        "40",
        "--seed",
        "3",
        "--out",
        digits_dir.to_str().unwrap(),
    ]);
    assert_success(&o, "gen-data synthetic-digits");
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(digits_dir.join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["num_classes"], 3);
    assert_eq!(manifest["class_names"][0], "background");
    assert_eq!(manifest["class_names"][1], "digit-0");
    assert_eq!(manifest["class_names"][2], "digit-8");

    // The emitted IDX pair is a valid input for the real-corpus path.
    let images = digits_dir.join("images-idx3-ubyte");
    let labels = digits_dir.join("labels-idx1-ubyte");
    assert!(images.is_file() && labels.is_file());
    let via_idx = tmp.path().join("via-idx");
    let o = run(&[
        "gen-data",
        "--kind",
        "noisy-mnist",
        "--images",
        images.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--digits",
        "0,8",
        "--seed",
        "3",
        "--out",
        via_idx.to_str().unwrap(),
    ]);
    assert_success(&o, "gen-data noisy-mnist from synthetic IDX");
    // Same seed, same pipeline: the cached splits agree byte-for-byte.
    for name in ["train.cten", "val.cten", "test.cten"] {
        let a = std::fs::read(digits_dir.join(name)).unwrap();
        let b = std::fs::read(via_idx.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between generation paths");
    }
}

fn table_row(text: &str) -> &str {
    text.lines()
        .find(|l| l.starts_with("test "))
        .expect("metric row for the test split")
}

#[test]
fn train_eval_occlusion_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_shapes(&data, 24, 5);

    let out_dir = tmp.path().join("run");
    let config = tmp.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
  "schema_version": 1,
  "model": "trcapsnet-mini",
  "data_dir": "{}",
  "out_dir": "{}",
  "train": {{ "epochs": 1, "batch_size": 8, "seed": 5 }}
}}"#,
            data.display(),
            out_dir.display()
        ),
    )
    .unwrap();
    let o = run(&["train", "--config", config.to_str().unwrap()]);
    assert_success(&o, "train");
    let best = out_dir.join("best.json");
    assert!(best.is_file());
    assert!(out_dir.join("best.cten").is_file());
    assert!(out_dir.join("training_log.csv").is_file());

    let eval_args = [
        "eval",
        "--checkpoint",
        best.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    let o = run(&eval_args);
    assert_success(&o, "eval");
    let eval_out = stdout(&o);
    assert!(eval_out.contains("±"), "eval prints Dice mean ± stdev:\n{eval_out}");
    let log = out_dir.join("eval_log.csv");
    assert!(log.is_file());
    let o = run(&eval_args);
    assert_success(&o, "second eval");
    let lines = std::fs::read_to_string(&log).unwrap().lines().count();
    assert_eq!(lines, 3, "eval appends, never overwrites");

    // Zero occlusion leaves the metrics exactly at their plain-eval values.
    let o = run(&[
        "occlusion-test",
        "--checkpoint",
        best.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--lines",
        "0",
    ]);
    assert_success(&o, "occlusion-test --lines 0");
    let occ_out = stdout(&o);
    assert_eq!(table_row(&eval_out), table_row(&occ_out));

    let pgm_dir = tmp.path().join("pgms");
    let o = run(&[
        "occlusion-test",
        "--checkpoint",
        best.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--lines",
        "2",
        "--pgm-dir",
        pgm_dir.to_str().unwrap(),
    ]);
    assert_success(&o, "occlusion-test --lines 2");
    let pgms: Vec<_> = std::fs::read_dir(&pgm_dir).unwrap().collect();
    // 24 items split 0.8/0.1/0.1 leaves 3 test items, all under the 16 cap.
    assert_eq!(pgms.len(), 3);
    for entry in pgms {
        let bytes = std::fs::read(entry.unwrap().path()).unwrap();
        assert!(bytes.starts_with(b"P5\n"), "prediction images are binary PGM");
    }
}

#[test]
fn train_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.json");
    std::fs::write(
        &config,
        r#"{ "schema_version": 1, "model": "trcapsnet-mini",
             "data_dir": "x", "out_dir": "y", "typo_field": true }"#,
    )
    .unwrap();
    let o = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("typo_field"), "error names the offending key: {err}");
}

#[test]
fn gradcheck_toy_is_within_tolerance() {
    let o = run(&["gradcheck", "--model", "toy", "--seed", "42"]);
    assert_success(&o, "gradcheck toy");
    let text = stdout(&o);
    assert!(text.contains("max relative gradient error"), "{text}");
    let o = run(&["gradcheck", "--model", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_shapes_reports_documented_corrections() {
    let o = run(&["audit-shapes", "--model", "trcapsnet-hippo-d1"]);
    assert_success(&o, "audit-shapes trcapsnet-hippo-d1");
    let text = stdout(&o);
    assert!(text.contains("corrected (conv2-kernel)"), "{text}");
    assert!(text.contains("corrected (class-conv-padding)"), "{text}");
    assert!(text.contains("3021058"), "{text}");
    assert!(!text.contains("MISMATCH"), "{text}");

    let o = run(&["audit-shapes", "--model", "unet-hippo-3x7"]);
    assert_success(&o, "audit-shapes unet-hippo-3x7");
    let text = stdout(&o);
    assert!(text.contains("corrected (pool-stride)"), "{text}");
    assert!(text.contains("1140482"), "{text}");
    assert!(!text.contains("MISMATCH"), "{text}");

    let o = run(&["audit-shapes", "--model", "no-such-model"]);
    assert_eq!(o.status.code(), Some(2));
}
