use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn tiny_config(name: &str) -> Value {
    json!({
        "name": name,
        "seed": 3,
        "task": {
            "kind": "gmm_bridge",
            "n_pairs": 8,
            "n_test": 8,
            "weights": [0.5, 0.5],
            "means": [[-2.0, 0.0], [2.0, 0.0]],
            "var": 0.6,
            "labels": [0, 1],
            "modes": [0, 1]
        },
        "geodesic": { "pairs": 1, "segments": 16, "oracle_resolution": 32, "solver": { "iterations": 50 } },
        "distill": {
            "tau": 0.05, "teacher_rule": "adam", "teacher_lr": 0.003, "student_rule": "adam",
            "epochs": 3, "batch_size": 8, "t_grid_size": 4, "monitor_pairs": 8, "hidden": [8], "ode_steps": 10
        },
        "flowmatch": { "settings": { "steps": 20, "batch": 8, "hidden": [8] } },
        "sample": { "nfe": [4], "trajectories": 2 },
        "eval": { "pairs": 4, "residual_times": 3, "path_nodes": 9 }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn gfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfm")).args(args).output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    gfm(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_required_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("x");
    cfg.as_object_mut().unwrap().remove("task");
    let o = run("geodesic", &write_config(dir.path(), &cfg), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing field `task`"), "{}", stderr(&o));
}

#[test]
fn unknown_key_reports_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("x");
    cfg["flowmatch"]["settings"]["learning_rate"] = json!(0.1);
    let o = run("train-fm", &write_config(dir.path(), &cfg), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("flowmatch.settings") && e.contains("learning_rate"), "{e}");
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (path, value) in [("name", json!("../escape")), ("sample", json!({ "nfe": [3], "method": "heun" }))] {
        let mut cfg = tiny_config("x");
        cfg[path] = value;
        let o = run("sample", &write_config(dir.path(), &cfg), dir.path(), &[]);
        assert_eq!(o.status.code(), Some(2), "{path}: {}", stderr(&o));
    }
}

#[test]
fn geodesic_training_needs_distillation_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config("order"));
    let o = run("train-fm", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `distill` first"), "{}", stderr(&o));
    assert!(run("distill", &cfg, dir.path(), &[]).status.success());
    let o = run("train-fm", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("order/checkpoints/velocity_geodesic.gfnc").exists());
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("nan");
    cfg["flowmatch"] = json!({ "modes": ["linear"], "settings": { "steps": 50, "batch": 8, "hidden": [8], "lr": 1e300, "clip": null, "cosine_decay": false } });
    let o = run("train-fm", &write_config(dir.path(), &cfg), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn pipeline_is_byte_identical_and_manifest_hashes_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config("det"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run("pipeline", &cfg, out, &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a.join("det")), tree(&b.join("det")));
    assert_eq!(ta, tb);
    for dir in ["checkpoints/", "csv/"] {
        assert!(ta.keys().any(|k| k.starts_with(dir)));
    }
    let manifest: Value = serde_json::from_slice(&ta["manifest.json"]).unwrap();
    assert_eq!(manifest["seed"], json!(3));
    let outputs = manifest["outputs"].as_object().unwrap();
    assert_eq!(outputs.len(), ta.len() - 1);
    for (rel, hash) in outputs {
        let digest: String = Sha256::digest(&ta[rel]).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hash.as_str().unwrap(), digest, "{rel}");
    }
    let commands: Vec<&str> = manifest["commands"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    assert_eq!(commands, ["distill", "eval", "geodesic", "sample", "train-fm"]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config("seeded"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("geodesic", &cfg, &a, &[]).status.success());
    assert!(run("geodesic", &cfg, &b, &["--seed", "9"]).status.success());
    let m: Value = serde_json::from_slice(&fs::read(b.join("seeded/manifest.json")).unwrap()).unwrap();
    assert_eq!((m["seed"].clone(), m["config"]["distill"]["seed"].clone()), (json!(9), json!(9)));
    let paths = |root: &Path| fs::read(root.join("seeded/csv/geodesic_paths.csv")).unwrap();
    assert_ne!(paths(&a), paths(&b));
    // reusing a run directory with a different effective config is refused
    let o = run("geodesic", &cfg, &a, &["--seed", "9"]);
    assert_eq!(o.status.code(), Some(2));
}
