use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use nrc_cli::store::{read_frames, sha256_file, write_frames, FrameSet};
use nrc_cli::{load_experiment, run_synth, with_workers, CliError, Pipeline, RunOptions, Stage};
use serde_json::{json, Value};

fn nrc() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nrc"));
    c.env_remove(nrc_cli::WORK_DIR_ENV);
    c
}

fn tiny_model() -> Value {
    json!({
        "sfeb_channels": [2, 2, 2, 2, 2, 2],
        "tfeb_hidden": [4, 2],
        "tcb_units": [8, 8, 8, 8, 8],
    })
}

/// Synthetic corpus in `dir` plus a fast config; `extra` overrides top-level keys.
fn setup(dir: &Path, n_per_class: usize, extra: Value) -> PathBuf {
    run_synth(n_per_class, 7, dir).unwrap();
    let mut cfg = json!({
        "heart_manifest": "heart.csv",
        "lung_manifest": "lung.csv",
        "work_dir": "work",
        "seed": 11,
        "model": tiny_model(),
        "train": { "epochs": 1, "validation_fraction": 0.25 },
        "timing": { "n_samples": 1, "repetitions": 1 },
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("experiment.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn run(config: &Path, stage: Stage) -> nrc_cli::Result<nrc_cli::StageOutcome> {
    let exp = load_experiment(config, RunOptions::default())?;
    Pipeline::new(&exp).run(stage)
}

fn hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), sha256_file(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_counts_determinism_and_zero() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = run_synth(40, 7, a.path()).unwrap();
    assert_eq!((o.heart_files, o.lung_files), (200, 40));
    assert_eq!(std::fs::read_dir(a.path().join("heart")).unwrap().count(), 200);
    assert_eq!(std::fs::read_dir(a.path().join("lung")).unwrap().count(), 40);
    assert!(a.path().join("heart.csv").is_file() && a.path().join("lung.csv").is_file());
    run_synth(40, 7, b.path()).unwrap();
    assert_eq!(hashes(a.path()), hashes(b.path()));

    let out = nrc().args(["synth", "--n-per-class", "0", "--out"]).arg(a.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, json!({}));
    match run(&cfg, Stage::Eval) {
        Err(CliError::StageOrder { stage, missing, .. }) => {
            assert_eq!(stage, "eval");
            assert_eq!(missing, "transform");
        }
        other => panic!("expected a stage-order error, got {other:?}"),
    }
    let out = nrc().args(["mix", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prepare"));
}

#[test]
fn missing_recording_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, json!({}));
    let victim = dir.path().join("heart/AS_0001.wav");
    std::fs::remove_file(&victim).unwrap();
    let out = nrc().args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("AS_0001.wav"));

    let out = nrc().args(["prepare", "--skip-bad", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("work/prepare/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["summary"]["heart_frames"], 9);
}

#[test]
fn unchanged_rerun_is_a_cache_hit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, json!({}));
    let first = nrc().args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert!(String::from_utf8_lossy(&first.stdout).contains("12 rebuilt"));
    let again = nrc().args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(again.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 rebuilt"));

    // Rewriting an input with new content invalidates the cache.
    let clip = dir.path().join("heart/N_0000.wav");
    let other = dir.path().join("heart/N_0001.wav");
    std::fs::copy(&other, &clip).unwrap();
    let changed = nrc().args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert!(String::from_utf8_lossy(&changed.stdout).contains("12 rebuilt"));
}

#[test]
fn stale_upstream_is_a_stage_order_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, json!({}));
    run(&cfg, Stage::Prepare).unwrap();
    run(&cfg, Stage::Mix).unwrap();
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["mix"] = json!({ "snr_levels": [3.0] });
    std::fs::write(&cfg, v.to_string()).unwrap();
    assert!(matches!(run(&cfg, Stage::Transform), Err(CliError::StageOrder { missing: "mix", .. })));
}

#[test]
fn mixed_provenance_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.frames");
    let set = FrameSet {
        snr_db: None,
        items: Vec::new(),
        samples: Vec::new(),
    };
    write_frames(&p, "aaaa", &set, 7000, 2000).unwrap();
    assert!(matches!(read_frames(&p, "bbbb"), Err(CliError::Provenance { .. })));
    assert_eq!(read_frames(&p, "aaaa").unwrap(), set);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1, json!({ "transform": { "kind": "wavelet" } }));
    let out = nrc().args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(&cfg, json!({ "heart_manifest": "heart.csv", "lung_manifest": "lung.csv" }).to_string()).unwrap();
    let e = load_experiment(&cfg, RunOptions::default()).unwrap_err();
    assert!(e.to_string().contains("seed"), "{e}");
    assert!(load_experiment(&cfg, RunOptions { seed: Some(1), ..Default::default() }).is_ok());

    std::fs::write(&cfg, json!({ "heart_manifest": "nope.csv", "lung_manifest": "lung.csv", "seed": 0 }).to_string()).unwrap();
    let out = nrc().args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn work_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 1, json!({}));
    let alt = dir.path().join("elsewhere");
    let out = nrc().env(nrc_cli::WORK_DIR_ENV, &alt).args(["prepare", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(alt.join("prepare/manifest.json").is_file());
    assert!(!dir.path().join("work").exists());
}

#[test]
fn worker_count_does_not_change_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2, json!({}));
    let exp = load_experiment(&cfg, RunOptions::default()).unwrap();
    let mut digests = Vec::new();
    for workers in [1, 3] {
        std::fs::remove_dir_all(dir.path().join("work")).ok();
        with_workers(Some(workers), || {
            let p = Pipeline::new(&exp);
            for s in [Stage::Prepare, Stage::Mix, Stage::Transform] {
                p.run(s).unwrap();
            }
        })
        .unwrap();
        digests.push(hashes(&dir.path().join("work")));
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn default_training_hyperparameters_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("experiment.json");
    run_synth(1, 0, dir.path()).unwrap();
    std::fs::write(&cfg, json!({ "heart_manifest": "heart.csv", "lung_manifest": "lung.csv", "seed": 3 }).to_string()).unwrap();
    let exp = load_experiment(&cfg, RunOptions::default()).unwrap();
    let h = &Pipeline::new(&exp).params(Stage::Train).unwrap()["hyperparameters"];
    assert_eq!(h["batch_size"], 16);
    assert_eq!(h["epochs"], 60);
    assert_eq!(h["learning_rate"], 0.0001);
    assert_eq!(h["optimizer"], "Adam");
    assert_eq!(h["loss_function"], "categorical_crossentropy");
}

#[test]
fn full_run_reports_every_condition_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 40, json!({ "train": { "epochs": 1 } }));
    for s in Stage::ALL {
        let o = run(&cfg, s).unwrap();
        assert!(!o.cached);
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("work/report/report.json")).unwrap()).unwrap();
    let rows: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["condition"].as_str().unwrap()).collect();
    assert_eq!(rows, ["clean", "15dB", "10dB", "5dB", "0dB"]);
    for r in report["rows"].as_array().unwrap() {
        assert_eq!(r["samples"], 40);
        let a = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&a));
    }
    assert!(report["timing"]["median_seconds_per_sample"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(dir.path().join("work/report/accuracy_vs_snr.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("work/report/history.png").is_file());
    assert_eq!(std::fs::read_dir(dir.path().join("work/report/samples")).unwrap().count(), 25);

    // Every cached stage reports no work.
    for s in Stage::ALL {
        assert!(run(&cfg, s).unwrap().cached, "{s} should be cached");
    }

    // Deleting the model stage and downstream outputs reproduces them.
    let before: Vec<_> = [Stage::Train, Stage::Eval, Stage::Report]
        .iter()
        .map(|s| Pipeline::new(&load_experiment(&cfg, RunOptions::default()).unwrap()).read_manifest(*s).unwrap())
        .collect();
    for s in ["train", "eval", "report"] {
        std::fs::remove_dir_all(dir.path().join("work").join(s)).unwrap();
    }
    for (s, old) in [Stage::Train, Stage::Eval, Stage::Report].into_iter().zip(before) {
        let new = run(&cfg, s).unwrap().manifest;
        let det = |m: &nrc_cli::StageManifest| m.artifacts.iter().filter(|a| a.deterministic).cloned().collect::<Vec<_>>();
        assert_eq!(det(&new), det(&old), "{s} artifacts changed");
    }
}
