use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn tiny() -> Value {
    json!({
        "preset": "desk",
        "seed": 11,
        "run_id": "tiny",
        "scene": {"scene_size_px": 128, "mean_field_diameter_px": 16},
        "test_scene_size_px": 64,
        "arch": {"depth": 2, "base_width": 4},
        "train": {"epochs": 2, "batch_size": 4, "chip_size": 24, "chip_overlap": 4, "schedule": {"total_epochs": 2}},
        "mc": {"trials": 3},
        "tiles": {"core_size": 32, "input_size": 40},
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fieldshift"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn error_json(o: &Output) -> Value {
    let s = String::from_utf8_lossy(&o.stderr);
    let line = s.lines().last().expect("error line on stderr");
    serde_json::from_str(line).expect("stderr error is JSON")
}

/// Every file under `root` except manifests, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(base).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    let mut m = BTreeMap::new();
    walk(root, root, &mut m);
    m
}

fn full_chain(config: &Path, out: &Path, threads: &str) {
    for cmd in ["simulate", "train", "predict", "evaluate"] {
        ok(run(cmd, config, out, &["--threads", threads]));
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn invalid_config_exits_2_with_json_error() {
    let d = TempDir::new().unwrap();
    let bad = write_config(d.path(), "bad.json", &json!({"preset": "desk"}));
    let o = run("simulate", &bad, &d.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("seed"));

    let unknown = write_config(d.path(), "u.json", &json!({"preset": "nope", "seed": 1}));
    assert_eq!(run("simulate", &unknown, &d.path().join("out"), &[]).status.code(), Some(2));
    let typo = write_config(d.path(), "t.json", &json!({"preset": "desk", "seed": 1, "epochz": 3}));
    assert_eq!(run("train", &typo, &d.path().join("out"), &[]).status.code(), Some(2));
    let missing = run("simulate", &d.path().join("absent.json"), &d.path().join("out"), &[]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!d.path().join("out/scene").exists());
}

#[test]
fn missing_inputs_exit_3() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let o = run("train", &c, &d.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"], "input");
    assert_eq!(run("evaluate", &c, &d.path().join("out"), &[]).status.code(), Some(3));
}

#[test]
fn chain_outputs_manifests_and_logs() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let out = d.path().join("out");
    full_chain(&c, &out, "2");

    let log = fs::read_to_string(out.join("train/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for y in ["y1", "y2", "y3"] {
        for f in ["mean_probs.fsch", "std_probs.fsch", "entropy.fsch", "mutual_info.fsch", "hardened.fsmk", "hardened.png", "interior_prob.png"] {
            assert!(out.join("predict").join(y).join(f).is_file(), "{}/{}", y, f);
        }
        assert!(out.join(format!("evaluate/confusion_{}.png", y)).is_file());
    }
    let metrics = fs::read_to_string(out.join("evaluate/metrics.csv")).unwrap();
    // 3 years of 2x2 tiles plus the header.
    assert_eq!(metrics.lines().count(), 13);
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("tiny,mm-lab,")));

    // Manifest closure: every file written is listed with its digest.
    for cmd in ["scene", "train", "predict", "evaluate"] {
        let dir = out.join(cmd);
        let m = manifest(&dir);
        assert_eq!(m["tool"], "fieldshift");
        assert_eq!(m["resolved_config"]["seed"], 11);
        let outputs = m["outputs"].as_object().unwrap();
        let files = tree(&dir);
        assert_eq!(outputs.len(), files.len(), "{}", cmd);
        for (rel, bytes) in files {
            use sha2::Digest;
            let digest = format!("{:x}", sha2::Sha256::digest(&bytes));
            assert_eq!(outputs[&rel], digest, "{}/{}", cmd, rel);
        }
        assert!(!m["inputs"].as_object().unwrap().is_empty());
    }
    assert!(manifest(&out.join("train"))["inputs"].as_object().unwrap().contains_key("scene/train/y1.fsch"));
    assert!(manifest(&out.join("evaluate"))["inputs"].as_object().unwrap().contains_key("predict/y2/hardened.fsmk"));
}

#[test]
fn rerun_from_manifest_is_byte_identical_at_1_and_4_threads() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let a = d.path().join("a");
    full_chain(&c, &a, "1");
    let b = d.path().join("b");
    for cmd in ["simulate", "train", "predict", "evaluate"] {
        let dir = if cmd == "simulate" { "scene" } else { cmd };
        let m = a.join(dir).join("manifest.json");
        ok(run(cmd, &m, &b, &["--threads", "4"]));
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn simulate_twice_is_identical_and_replaces_atomically() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let out = d.path().join("out");
    ok(run("simulate", &c, &out, &[]));
    let first = tree(&out.join("scene"));
    ok(run("simulate", &c, &out, &[]));
    assert_eq!(first, tree(&out.join("scene")));
    let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("scene")]);
}

#[test]
fn checkpoint_architecture_mismatch_is_rejected() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let out = d.path().join("out");
    ok(run("simulate", &c, &out, &[]));
    ok(run("train", &c, &out, &[]));
    let mut wide = tiny();
    wide["arch"]["base_width"] = json!(6);
    let w = write_config(d.path(), "w.json", &wide);
    let o = run("predict", &w, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"], "checkpoint");
}

#[test]
fn zero_rate_ensemble_is_independent_of_trial_count() {
    let d = TempDir::new().unwrap();
    let mut one = tiny();
    one["mc"] = json!({"trials": 1, "inference_dropout_rate": 0.0});
    let mut ten = tiny();
    ten["mc"] = json!({"trials": 10, "inference_dropout_rate": 0.0});
    let (c1, c10) = (write_config(d.path(), "1.json", &one), write_config(d.path(), "10.json", &ten));
    let (o1, o10) = (d.path().join("o1"), d.path().join("o10"));
    for (c, o) in [(&c1, &o1), (&c10, &o10)] {
        for cmd in ["simulate", "train", "predict"] {
            ok(run(cmd, c, o, &[]));
        }
    }
    assert_eq!(tree(&o1.join("predict")), tree(&o10.join("predict")));
}

#[test]
fn divergent_training_exits_4_naming_the_batch() {
    let d = TempDir::new().unwrap();
    let mut v = tiny();
    v["train"]["schedule"]["initial_lr"] = json!(1e30);
    let c = write_config(d.path(), "c.json", &v);
    let out = d.path().join("out");
    ok(run("simulate", &c, &out, &[]));
    let o = run("train", &c, &out, &[]);
    assert_eq!(o.status.code(), Some(4));
    let e = error_json(&o);
    assert_eq!(e["error"], "training");
    assert!(e["message"].as_str().unwrap().contains("epoch 0 batch"));
    assert!(!out.join("train/checkpoint.fsnw").exists());
}

#[test]
fn single_cell_ablation_equals_the_composed_commands() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let out = d.path().join("out");
    full_chain(&c, &out, "2");
    let matrix = json!({"base": tiny(), "cells": [{"name": "tiny", "overrides": {}}]});
    let m = write_config(d.path(), "m.json", &matrix);
    ok(run("ablate", &m, &out, &[]));
    for f in ["metrics.csv", "by_year.csv", "by_tile.csv", "by_run.csv"] {
        assert_eq!(fs::read(out.join("ablate").join(f)).unwrap(), fs::read(out.join("evaluate").join(f)).unwrap(), "{}", f);
    }
    assert_eq!(
        fs::read(out.join("ablate/cells/tiny/train_log.csv")).unwrap(),
        fs::read(out.join("train/train_log.csv")).unwrap()
    );
}

#[test]
fn ablation_rows_follow_cell_names_and_failures_are_recorded() {
    let d = TempDir::new().unwrap();
    let matrix = json!({"base": tiny(), "cells": [
        {"name": "plain", "overrides": {"dropout_regime": "none"}},
        {"name": "no-photo", "overrides": {"augment": {"photometric": false}}},
        {"name": "diverges", "overrides": {"train": {"schedule": {"initial_lr": 1e30}}}},
    ]});
    let m = write_config(d.path(), "m.json", &matrix);
    let out = d.path().join("out");
    let o = ok(run("ablate", &m, &out, &[]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("diverges: failed"));
    let status: Value = serde_json::from_slice(&fs::read(out.join("ablate/status.json")).unwrap()).unwrap();
    assert_eq!(status["partial"], true);
    assert_eq!(status["failed"][0]["cell"], "diverges");
    let by_run = fs::read_to_string(out.join("ablate/by_run.csv")).unwrap();
    let labels: Vec<&str> = by_run.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["plain", "plain", "plain", "plain", "no-photo", "no-photo", "no-photo", "no-photo"]);
    assert!(out.join("ablate/cells/no-photo/confusion_y3.png").is_file());
}

#[test]
fn no_photometric_switch_lands_in_the_manifest() {
    let d = TempDir::new().unwrap();
    let c = write_config(d.path(), "c.json", &tiny());
    let out = d.path().join("out");
    ok(run("simulate", &c, &out, &["--no-photometric", "--seed", "5"]));
    let m = manifest(&out.join("scene"));
    assert_eq!(m["resolved_config"]["augment"]["photometric"], false);
    assert_eq!(m["resolved_config"]["seed"], 5);
    assert_eq!(m["seed"], 5);
}
