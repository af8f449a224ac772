//! End-to-end checks of the binary: exit codes per failure class, stage
//! commands chaining through a shared output directory, determinism of
//! the generated corpus.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neurogate"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ng_cli_{tag}_{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A config small enough for CLI tests to finish in seconds.
fn write_fast_config(dir: &PathBuf) -> PathBuf {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "seed": 5,
        "out_dir": dir.join("out"),
        "model": {
            "vocab_size": 256, "d_model": 16, "n_layers": 6, "n_heads": 2,
            "d_ffn": 32, "max_seq": 48, "n_visual_tokens": 2, "seed": 5
        },
        "corpus": {
            "n_subjects": 4, "images_per_subject": 1, "n_templates": 3,
            "augment": true, "holdout_subjects": [3], "holdout_templates": [],
            "test_fraction": 0.3
        },
        "train": { "steps": 40, "batch_size": 2, "learning_rate": 0.005, "seed": 5 },
        "probe": { "steps": 3, "learning_rate": 0.1, "l1_weight": 0.005, "parallelism": 1 },
        "alpha": 1.25,
        "gate_threshold": 0.3,
        "edit": { "learning_rate": 0.01, "epochs": 1, "batch_size": 4 },
        "search": { "max_radius": 1 },
        "eval": { "max_new": 6 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_deterministic_and_creates_output_dir() {
    let dir = tmp_dir("gen");
    let config = write_fast_config(&dir);
    let run = |out: &str| {
        let status = bin()
            .args(["gen-data", "--config"])
            .arg(&config)
            .args(["--out"])
            .arg(dir.join(out))
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(dir.join(out).join("01_corpus/manifest.json")).unwrap()
    };
    let a = run("out_a");
    let b = run("out_b");
    assert_eq!(a, b, "manifest digests must be stable across reruns");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn malformed_config_names_field_and_exits_config_code() {
    let dir = tmp_dir("badcfg");
    let path = dir.join("config.json");
    std::fs::write(&path, br#"{"schema_version":1,"seed":1,"mystery_knob":9}"#).unwrap();
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mystery_knob"), "{stderr}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_prior_stage_exits_io_code() {
    let dir = tmp_dir("iostage");
    let config = write_fast_config(&dir);
    // train-base without gen-data: the corpus file is absent
    let out = bin()
        .args(["train-base", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn stage_commands_chain_and_pipeline_resumes() {
    let dir = tmp_dir("chain");
    let config = write_fast_config(&dir);
    for cmd in [
        "gen-data",
        "train-base",
        "probe",
        "aggregate",
        "locate-layer",
        "edit",
        "evaluate",
        "stats",
    ] {
        let out = bin().args([cmd, "--config"]).arg(&config).output().unwrap();
        assert!(
            out.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out_dir = dir.join("out");
    assert!(out_dir.join("07_eval/report.json").exists());
    assert!(out_dir.join("07_eval/report.csv").exists());
    assert!(out_dir.join("stats/histogram.csv").exists());
    assert!(out_dir.join("stats/proportions.csv").exists());

    // the pipeline command over the same directory skips everything
    let out = bin()
        .args(["pipeline", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ran []"), "{stdout}");
    std::fs::remove_dir_all(&dir).ok();
}
