use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_psumnet"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A tiny dataset and a narrow, short-running config in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", "data", "--samples", "6", "--frames", "16"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"version":1,"data":{"manifest":"data/manifest.json"},
            "model":{"topology":"ntu25","num_classes":8,"width":8,"window":16,"persons":1},
            "train":{"epochs":2,"batch_size":8}}"#,
    )
    .unwrap();
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_every_clip_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = run(&["synth", "--out", out, "--classes", "4", "--samples", "6", "--seed", "3"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = files(&dir.path().join("a"));
    assert_eq!(a.len(), 4 * 6 + 1);
    assert_eq!(a, files(&dir.path().join("b")));
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    let val = manifest.as_array().unwrap().iter().filter(|e| e["split"] == "val").count();
    assert_eq!(val, 8);
}

#[test]
fn synth_rejects_a_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", "x", "--classes", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_eval_round_trip() {
    let dir = workspace();
    let p = dir.path();
    let o = run(&["train", "--config", "cfg.json", "--stream", "all", "--out", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    for part in ["body", "hands", "legs"] {
        assert!(p.join(format!("run/{part}.ckpt")).is_file());
        let log = fs::read_to_string(p.join(format!("run/{part}.log.jsonl"))).unwrap();
        let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        for key in ["epoch", "lr", "loss", "train_acc", "val_acc"] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
    }
    let ckpts = ["run/body.ckpt", "run/hands.ckpt", "run/legs.ckpt"];
    let eval = |extra: &[&str]| -> Value {
        let mut args = vec!["eval", "--config", "cfg.json", "--checkpoints"];
        args.extend(ckpts);
        args.extend(extra);
        let o = run(&args, p);
        assert!(o.status.success(), "{}", stderr(&o));
        serde_json::from_str(&stdout(&o)).unwrap()
    };

    // one-hot weights reproduce the single stream
    let hands_only = eval(&["--fusion-weights", "0,1,0"]);
    let report = &hands_only["report"];
    assert_eq!(report["top1"], report["streams"]["hands"]["top1"]);
    assert_eq!(report["confusion"], report["streams"]["hands"]["confusion"]);

    // the full fraction is plain evaluation
    let plain = eval(&[]);
    let partial = eval(&["--partial", "0.5,1.0"]);
    let points = partial["partial"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[1]["report"], plain["report"]);
    assert_eq!(plain["config"]["model"]["topology"], "ntu25");

    // confusion rows sum to per-class counts
    let confusion = plain["report"]["confusion"].as_array().unwrap();
    let total: u64 = confusion.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, plain["report"]["samples"].as_u64().unwrap());

    let o = run(&["eval", "--config", "cfg.json", "--checkpoints", "run/body.ckpt", "--fusion-weights", "1,x"], p);
    assert_eq!(o.status.code(), Some(2));

    // finished runs resume to the same files; a changed config is refused
    let before = files(&p.join("run"));
    let o = run(&["train", "--config", "cfg.json", "--out", "run", "--resume"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(before, files(&p.join("run")));
    let o = run(&["train", "--config", "cfg.json", "--out", "run", "--resume", "--lr", "0.05"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config hash"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"version":1,"data":{"manifest":"nowhere/manifest.json"},"model":{"topology":"ntu25","num_classes":8}}"#,
    )
    .unwrap();
    let o = run(&["train", "--config", "cfg.json", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere/manifest.json"), "{}", stderr(&o));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn config_typos_are_usage_errors() {
    let dir = workspace();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"version":1,"data":{"manifest":"data/manifest.json"},"model":{"topology":"ntu25","num_classes":8,"widht":8}}"#,
    )
    .unwrap();
    let o = run(&["train", "--config", "bad.json", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"));
}

#[test]
fn info_reports_the_default_budget() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["info", "--json"], dir.path());
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let total = v["total_params"].as_f64().unwrap();
    assert!((total / 2.8e6 - 1.0).abs() <= 0.25, "{total}");
    let o = run(&["info"], dir.path());
    assert!(stdout(&o).contains("total"));
}

#[test]
fn gradcheck_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--module", "samg", "--seeds", "2"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all passed"));
    let o = run(&["gradcheck", "--module", "attention"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_table_is_csv() {
    let dir = workspace();
    let p = dir.path();
    fs::write(
        p.join("small.json"),
        r#"{"version":1,"data":{"manifest":"data/manifest.json"},
            "model":{"topology":"ntu25","num_classes":8,"width":4,"window":8,"persons":1},
            "train":{"epochs":1,"batch_size":16}}"#,
    )
    .unwrap();
    let o = run(&["ablate", "--config", "small.json", "--out", "table.csv"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(p.join("table.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["config", "params", "top1"]);
    let names: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    for want in ["body", "body+hands", "body+hands+legs", "disjoint:body+hands+legs", "modality:bone_vel"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
}
