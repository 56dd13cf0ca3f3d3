//! End-to-end runs of the installed binary via `CARGO_BIN_EXE_pvnet`.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pvnet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvnet"))
        .args(args)
        .current_dir(dir)
        .env("PVNET_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let code = out.status.code().expect("exit code");
    assert_eq!(
        code,
        want,
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Micro config sized so the whole pipeline finishes in seconds.
fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "arm": "full",
            "n_classes": 4,
            "k": 4,
            "edge_widths": [4, 4, 6, 8],
            "st_widths": [4, 6, 4],
            "view_channels": [2, 3],
            "view_dim": 6,
            "embed_dim": 4,
            "fc_widths": [12, 8]
        },
        "train": {
            "epochs": 2,
            "phase_a_epochs": 1,
            "lr": 0.01,
            "batch_size": 4,
            "seed": 5,
            "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
        },
        "prep": {"n_points": 140, "n_views": 4, "view_size": 16, "seed": 3},
        "data_dir": "cache",
        "manifest": "corpus/manifest.json"
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_through_the_binary() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_config(dir);

    let out = pvnet(
        &["synth", "--config", "run.json", "--out", "corpus", "--train-per-class", "2",
          "--test-per-class", "2"],
        dir,
    );
    assert_code(&out, 0);
    assert!(dir.join("corpus/manifest.json").is_file());

    let out = pvnet(&["prep", "--config", "run.json", "--out", "out"], dir);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("prepped 16"), "{stdout}");
    assert!(dir.join("cache/index.json").is_file());

    let out = pvnet(&["train", "--config", "run.json", "--out", "out"], dir);
    assert_code(&out, 0);
    assert!(dir.join("out/checkpoint.ckpt").is_file());
    assert!(dir.join("out/best.ckpt").is_file());
    assert!(dir.join("out/metrics.csv").is_file());

    let out = pvnet(
        &["eval", "--config", "run.json", "--checkpoint", "out/checkpoint.ckpt", "--out", "out"],
        dir,
    );
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall"));
    assert!(dir.join("out/eval.json").is_file());

    let out = pvnet(
        &["retrieve", "--config", "run.json", "--checkpoint", "out/checkpoint.ckpt", "--out", "out"],
        dir,
    );
    assert_code(&out, 0);
    assert!(dir.join("out/features.pvt1").is_file());
    assert!(dir.join("out/pr_curve.csv").is_file());

    let out = pvnet(
        &["sweep", "--config", "run.json", "--checkpoint", "out/checkpoint.ckpt", "--out", "out"],
        dir,
    );
    assert_code(&out, 0);
    assert!(dir.join("out/sweep.csv").is_file());

    let out = pvnet(
        &["dump-masks", "--config", "run.json", "--checkpoint", "out/checkpoint.ckpt", "--out",
          "out"],
        dir,
    );
    assert_code(&out, 0);
    assert!(dir.join("out/masks/index.json").is_file());

    // Resume training from the finished checkpoint.
    let out = pvnet(
        &["train", "--config", "run.json", "--checkpoint", "out/checkpoint.ckpt", "--out", "out2"],
        dir,
    );
    assert_code(&out, 0);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_config(dir);
    pvnet(
        &["synth", "--config", "run.json", "--out", "corpus", "--train-per-class", "1",
          "--test-per-class", "1", "--seed", "11"],
        dir,
    );
    let echoed = std::fs::read_to_string(dir.join("corpus/config.resolved.json"));
    // Synth does not echo; prep does. Check via prep instead.
    assert!(echoed.is_err());
    let out = pvnet(&["prep", "--config", "run.json", "--out", "out", "--seed", "11"], dir);
    assert_code(&out, 0);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["train"]["seed"], 11);
}

#[test]
fn validation_problems_exit_2() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();

    // Missing config file.
    let out = pvnet(&["train", "--config", "absent.json", "--out", "out"], dir);
    assert_code(&out, 2);

    // Unknown field in the config.
    std::fs::write(dir.join("bad.json"), r#"{"modle": {}}"#).unwrap();
    let out = pvnet(&["train", "--config", "bad.json", "--out", "out"], dir);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));

    // Inconsistent sizes: k not smaller than the cached point budget.
    std::fs::write(
        dir.join("sizes.json"),
        r#"{"model": {"k": 64}, "prep": {"n_points": 64, "n_views": 4, "view_size": 16, "seed": 0}}"#,
    )
    .unwrap();
    let out = pvnet(&["train", "--config", "sizes.json", "--out", "out"], dir);
    assert_code(&out, 2);

    // Usage errors (unknown subcommand) are also exit 2, from the parser.
    let out = pvnet(&["frobnicate"], dir);
    assert_code(&out, 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_config(dir);
    pvnet(
        &["synth", "--config", "run.json", "--out", "corpus", "--train-per-class", "1",
          "--test-per-class", "1"],
        dir,
    );
    let out = pvnet(&["prep", "--config", "run.json", "--out", "out"], dir);
    assert_code(&out, 0);
    let out = pvnet(
        &["eval", "--config", "run.json", "--checkpoint", "nope.ckpt", "--out", "out"],
        dir,
    );
    assert_code(&out, 1);
}

#[test]
fn gradcheck_runs_standalone() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = pvnet(&["gradcheck", "--out", "gc"], dir);
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model:full"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(dir.join("gc/gradcheck.csv").is_file());
}
