//! End-to-end runs of the `kt` binary: exit codes, config errors and a miniature pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn kt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kt"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn kt")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_config_key_exits_2_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, "{\n  \"seed\": 1,\n  \"trainig\": {}\n}\n").unwrap();
    let o = kt(&["--config", cfg.to_str().unwrap(), "report", "."], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("trainig") && err.contains("line 3"), "{err}");
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = kt(&["--config", "absent.json", "report", "."], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = kt(&["train", "--data", "no-such-dataset", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = kt(&["eval", "--data", "d", "--out", "o", "--method", "oracle"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"training": {"batch_size": 0}}"#).unwrap();
    let o = kt(&["--config", cfg.to_str().unwrap(), "train", "--data", "d", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

/// Generate, train, evaluate and report on a handful of quickly trained hosts.
#[test]
fn miniature_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.json");
    std::fs::write(
        &cfg,
        r#"{
  "seed": 3,
  "generation": {
    "step1": {"epochs": 1, "batch_size": 16, "lr": 0.01, "subset_size": 160},
    "step2": {"epochs": 1, "batch_size": 16, "lr": 0.01, "subset_size": 160}
  },
  "translator": {"model": {"num_layers": 1, "seq_len": 72, "hidden": 16,
                            "token_mlp_dim": 16, "channel_mlp_dim": 16, "dropout": 0.0}},
  "training": {"epochs": 4, "batch_size": 2, "eval_period": 2},
  "evaluation": {"hosts": 2}
}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();

    let o = kt(&["--config", c, "generate", "--seeds", "0..6", "--out", "pairs"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("6 records"));

    let o = kt(&["--config", c, "train", "--data", "pairs", "--out", "train"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "metrics.csv", "history.json", "checkpoints/best.ktpr", "loss.svg"] {
        assert!(root.join("train").join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(root.join("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    // Different training settings must not silently reuse the finished run.
    let o = kt(&["--config", c, "train", "--data", "pairs", "--out", "train", "--resume", "--epochs", "6"], root);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let best = root.join("train/checkpoints/best.ktpr");
    let o = kt(&["--config", c, "eval", "--data", "pairs", "--translator", best.to_str().unwrap(), "--out", "eval"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for m in ["translation", "random-init", "random-replacement", "greedy"] {
        assert!(stdout.contains(m), "{stdout}");
        assert!(root.join("eval").join(format!("{m}.json")).exists());
    }
    assert!(root.join("eval/summary.csv").exists());

    let o = kt(&["report", "eval"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("eval/summary.md").exists());
}

#[test]
fn worker_count_does_not_change_generated_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"generation": {"step1": {"subset_size": 96}, "step2": {"subset_size": 96}, "shard_size": 2}}"#,
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let mut digests = Vec::new();
    for jobs in ["1", "3"] {
        let out = format!("pairs-{jobs}");
        let o = kt(&["--config", c, "--jobs", jobs, "generate", "--seeds", "10..15", "--out", &out], root);
        assert!(o.status.success(), "{}", stderr(&o));
        digests.push(String::from_utf8_lossy(&o.stdout).rsplit("digest ").next().unwrap().trim().to_string());
        let mut files: Vec<_> = std::fs::read_dir(root.join(&out)).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        digests.push(format!("{files:?}"));
    }
    assert_eq!(digests[0], digests[2]);
    assert_eq!(digests[1], digests[3]);
    for f in std::fs::read_dir(root.join("pairs-1")).unwrap() {
        let name = f.unwrap().file_name();
        if name != "run-config.json" && name != "config.json" {
            let a = std::fs::read(root.join("pairs-1").join(&name)).unwrap();
            let b = std::fs::read(root.join("pairs-3").join(&name)).unwrap();
            assert!(a == b, "{name:?} differs");
        }
    }
}
