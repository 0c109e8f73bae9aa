use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

fn aal(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aal"))
        .args(args)
        .current_dir(cwd)
        .env("AAL_DATA_DIR", data_dir())
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A run small enough for a test: 100 training and 50 test digits.
fn tiny_config(extra: Value) -> Value {
    let mut base = json!({
        "dataset": { "kind": "mnist", "train_per_class": 10, "test_per_class": 5 },
        "model": { "widths": [2, 2, 4] },
        "train": { "epochs": 1, "batch_size": 25, "seed": 3 },
        "eval": { "pgd": { "method": "pgd", "epsilon": 0.1, "step_size": 0.05, "iterations": 2 } },
        "output_dir": "run"
    });
    merge(&mut base, extra);
    base
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

fn write_config(dir: &Path, config: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn train(dir: &Path, config: &Value) -> Output {
    let path = write_config(dir, config);
    aal(dir, &["train", "--config", path.to_str().unwrap()])
}

#[test]
fn one_epoch_run_writes_one_metrics_row_checkpoint_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &tiny_config(json!({})));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2, "{metrics}");
    assert_eq!(lines[0], "epoch,lr,train_loss,clean_acc,fgsm_acc,pgd_acc,seconds");
    assert!(lines[1].starts_with("1,"));
    assert!(run.join("checkpoint.ckpt").is_file());

    let echo: Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["epochs"], 1);
    assert_eq!(echo["train"]["xi2"], 0.1);
    assert!(echo["dataset"]["root"].as_str().unwrap().ends_with("mnist-subset"));

    let summary: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["epochs"], 1);

    // Nothing besides the input config and the run directory appears.
    let mut entries: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(entries, ["config.json", "run"]);
}

#[test]
fn identical_configs_give_identical_metrics_bytes() {
    let config = tiny_config(json!({ "train": { "epochs": 2 } }));
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let out = train(dir.path(), &config);
            assert_eq!(code(&out), 0, "{}", stderr(&out));
            std::fs::read(dir.path().join("run/metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ \"train\": ").unwrap();
    let out = aal(dir.path(), &["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("invalid config"), "{}", stderr(&out));

    for bad in [
        json!({ "train": { "epoch": 1 } }),
        json!({ "train": { "zeta": 2.0 } }),
        json!({ "dataset": { "root": "/nonexistent" } }),
    ] {
        let out = train(dir.path(), &tiny_config(bad.clone()));
        assert_eq!(code(&out), 2, "{bad}: {}", stderr(&out));
    }
    let out = aal(dir.path(), &["train", "--config", "missing.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &tiny_config(json!({ "train": { "lr0": 1e30 } })));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}

#[test]
fn eval_reports_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &tiny_config(json!({})))), 0);
    let ckpt = dir.path().join("run/checkpoint.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let out = aal(dir.path(), &["eval", "--checkpoint", ckpt]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 1);
    let report: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(report["samples"], 50);
    for key in ["clean_acc", "fgsm_acc", "pgd_acc"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let out = aal(dir.path(), &["eval", "--checkpoint", ckpt, "--epsilon", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["fgsm_acc"], report["clean_acc"]);
    assert_eq!(report["pgd_acc"], report["clean_acc"]);

    let out = aal(dir.path(), &["eval", "--checkpoint", "nope.ckpt"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = aal(dir.path(), &["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("worst: "));
    assert!(stdout(&out).contains("small_cnn_loss"));

    let out = aal(dir.path(), &["gradcheck", "--seeds", "1", "--inject-fault", "relu"]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("worst: relu"), "{}", stdout(&out));

    let out = aal(dir.path(), &["gradcheck", "--inject-fault", "no_such_op"]);
    assert_eq!(code(&out), 2);
}

fn sweep(dir: &Path, param: &str, values: &str) -> Output {
    let config = write_config(dir, &tiny_config(json!({ "eval": { "pgd": { "method": "none" } } })));
    aal(
        dir,
        &["sweep", "--config", config.to_str().unwrap(), "--param", param, "--values", values],
    )
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = sweep(dir.path(), "xi2", "0,0.1");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("run/sweep_xi2.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,clean_acc,attacked_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("0.1,"));
    assert_eq!(stdout(&out), csv);

    let out = sweep(dir.path(), "kernel", "identity_m,squared_m,one_minus_squared_m");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 4);

    assert_eq!(code(&sweep(dir.path(), "learning_rate", "0.1")), 2);
    assert_eq!(code(&sweep(dir.path(), "kernel", "diagonal")), 2);
}

#[test]
fn dump_attention_writes_triplets() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), &tiny_config(json!({})))), 0);
    let ckpt = dir.path().join("run/checkpoint.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let count = |name: &str| std::fs::read_dir(dir.path().join(name)).unwrap().count();
    let out = aal(dir.path(), &["dump-attention", "--checkpoint", ckpt, "--n", "2", "--out", "maps"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(count("maps"), 6);
    let pgm = std::fs::read(dir.path().join("maps/1_Massoc.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(pgm.len(), 13 + 28 * 28);

    let out = aal(dir.path(), &["dump-attention", "--checkpoint", ckpt, "--n", "0", "--out", "none"]);
    assert_eq!(code(&out), 0);
    assert_eq!(count("none"), 0);

    let mut bytes = std::fs::read(dir.path().join("run/checkpoint.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(dir.path().join("corrupt.ckpt"), bytes).unwrap();
    let out = aal(dir.path(), &["dump-attention", "--checkpoint", "corrupt.ckpt", "--n", "1", "--out", "x"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
