use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pvseg_core::eval::FoldAssignment;
use pvseg_core::manifest::{Manifest, Provenance};
use pvseg_core::nifti::{read_labels, read_volume};
use pvseg_net::checkpoint;
use serde_json::{json, Value};

fn pvseg(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pvseg"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs");
    // every diagnostic line is a JSON object
    for line in String::from_utf8_lossy(&out.stderr).lines() {
        let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr line {line:?}: {e}"));
        assert!(v["level"].is_string() && v["event"].is_string());
    }
    out
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn phantom_spec(dir: &Path, datasets: &[&str], with_labels: bool, prefix: &str) -> PathBuf {
    write_json(
        &dir.join(format!("phantom_{prefix}.json")),
        &json!({
            "template": {"dims": [16, 16, 16], "n_tubes_wm": 4, "n_tubes_bg": 1, "length_range": [3.0, 6.0]},
            "cohort": {"datasets": datasets, "with_labels": with_labels, "id_prefix": prefix}
        }),
    )
}

fn make_cohort(dir: &Path, name: &str, n: usize, datasets: &[&str], with_labels: bool) -> PathBuf {
    let spec = phantom_spec(dir, datasets, with_labels, name);
    let out = dir.join(name);
    let o = pvseg(&[&"phantom", &"--config", &spec, &"--n", &n.to_string(), &"--seed", &"3", &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.json")
}

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "net": {"stages": 2, "base_channels": 2, "patch_size": [16, 16, 16], "blocks_per_stage": 1},
        "train": {"epochs": 1, "batches_per_epoch": 2, "seed": 4},
        "eval": {"bootstrap": {"n_resamples": 200, "seed": 1}}
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut cfg, extra) {
        for (k, v) in more {
            base.insert(k, v);
        }
    }
    write_json(&dir.join("config.json"), &cfg)
}

#[test]
fn phantom_cohort_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = make_cohort(dir.path(), "a", 3, &["x"], true);
    let spec = phantom_spec(dir.path(), &["x"], true, "a");
    let out_b = dir.path().join("b");
    assert_eq!(code(&pvseg(&[&"phantom", &"--config", &spec, &"--n", &"3", &"--seed", &"3", &"--out", &out_b])), 0);
    let b = out_b.join("manifest.json");
    assert_eq!(std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.cases.len(), 3);
    assert!(m.fingerprint.is_some());
    for c in &m.cases {
        let rel = c.image.strip_prefix(a.parent().unwrap()).unwrap();
        assert_eq!(std::fs::read(&c.image).unwrap(), std::fs::read(out_b.join(rel)).unwrap());
    }
}

#[test]
fn preprocess_is_deterministic_and_keeps_grids() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_cohort(dir.path(), "raw", 2, &["x"], true);
    let (o1, o2) = (dir.path().join("p1"), dir.path().join("p2"));
    assert_eq!(code(&pvseg(&[&"preprocess", &"--manifest", &m, &"--out", &o1])), 0);
    assert_eq!(code(&pvseg(&[&"preprocess", &"--manifest", &m, &"--out", &o2])), 0);
    let (p1, p2) = (Manifest::load(o1.join("manifest.json")).unwrap(), Manifest::load(o2.join("manifest.json")).unwrap());
    assert_eq!(p1.fingerprint, p2.fingerprint);
    assert!(p1.preprocess_fingerprint.is_some());
    let raw = Manifest::load(&m).unwrap();
    for ((a, b), r) in p1.cases.iter().zip(&p2.cases).zip(&raw.cases) {
        assert_eq!(std::fs::read(&a.image).unwrap(), std::fs::read(&b.image).unwrap());
        let v = read_volume(&a.image).unwrap();
        assert_eq!(v.dims(), [16, 16, 16]);
        // agnostic policy: labels pass through untouched
        assert_eq!(read_labels(a.labels.as_ref().unwrap()).unwrap(), read_labels(r.labels.as_ref().unwrap()).unwrap());
    }
}

#[test]
fn preprocess_empty_manifest_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_json(&dir.path().join("m.json"), &json!({"cases": []}));
    let out = dir.path().join("o");
    assert_eq!(code(&pvseg(&[&"preprocess", &"--manifest", &m, &"--out", &out])), 0);
    let p = Manifest::load(out.join("manifest.json")).unwrap();
    assert!(p.cases.is_empty() && p.fingerprint.is_some());
}

#[test]
fn unreadable_case_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_cohort(dir.path(), "raw", 2, &["x"], true);
    let raw = Manifest::load(&m).unwrap();
    std::fs::write(&raw.cases[1].image, b"garbage").unwrap();
    let out = dir.path().join("o");
    let o = pvseg(&[&"preprocess", &"--manifest", &m, &"--out", &out]);
    assert_eq!(code(&o), 2);
    let p = Manifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(p.cases.len(), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains(&raw.cases[1].id));
}

#[test]
fn invalid_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_json(
        &dir.path().join("m.json"),
        &json!({"cases": [{"id": "a", "dataset": "d", "image": "nope.nii.gz"}]}),
    );
    let out = dir.path().join("o");
    assert_eq!(code(&pvseg(&[&"preprocess", &"--manifest", &missing, &"--out", &out])), 1);
    let bad_cfg = write_json(&dir.path().join("c.json"), &json!({"net": {"num_classes": 7}}));
    let m = make_cohort(dir.path(), "raw", 1, &["x"], true);
    assert_eq!(code(&pvseg(&[&"preprocess", &"--manifest", &m, &"--config", &bad_cfg, &"--out", &out])), 1);
}

#[test]
fn cv_split_balances_datasets_and_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_cohort(dir.path(), "raw", 30, &["d0", "d1", "d2"], true);
    let (o1, o2) = (dir.path().join("f1"), dir.path().join("f2"));
    assert_eq!(code(&pvseg(&[&"cv-split", &"--manifest", &m, &"--k", &"5", &"--seed", &"9", &"--out", &o1])), 0);
    assert_eq!(code(&pvseg(&[&"cv-split", &"--manifest", &m, &"--k", &"5", &"--seed", &"9", &"--out", &o2])), 0);
    let t1 = std::fs::read_to_string(o1.join("folds.json")).unwrap();
    assert_eq!(t1, std::fs::read_to_string(o2.join("folds.json")).unwrap());
    let fa: FoldAssignment = serde_json::from_str(&t1).unwrap();
    let manifest = Manifest::load(&m).unwrap();
    for f in 0..5 {
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for id in fa.validation_ids(f) {
            *per.entry(manifest.get(id).unwrap().dataset.as_str()).or_default() += 1;
        }
        assert_eq!(per.values().copied().collect::<Vec<_>>(), vec![2, 2, 2], "fold {f}");
    }
}

#[test]
fn train_infer_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let raw = make_cohort(dir.path(), "raw", 6, &["x"], true);
    let pre = dir.path().join("pre");
    assert_eq!(code(&pvseg(&[&"preprocess", &"--manifest", &raw, &"--out", &pre])), 0);
    let m = pre.join("manifest.json");
    let folds = dir.path().join("folds");
    assert_eq!(code(&pvseg(&[&"cv-split", &"--manifest", &m, &"--k", &"3", &"--out", &folds])), 0);
    let f = folds.join("folds.json");
    let cfg = small_config(dir.path(), json!({}));
    let run = dir.path().join("run");

    let bad = pvseg(&[&"train", &"--manifest", &m, &"--folds", &f, &"--fold", &"3", &"--config", &cfg, &"--out", &run]);
    assert_eq!(code(&bad), 1);

    let o = pvseg(&[&"train", &"--manifest", &m, &"--folds", &f, &"--fold", &"0", &"--config", &cfg, &"--out", &run]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = checkpoint::load(run.join("checkpoint_last.ckpt")).unwrap();
    assert_eq!(ck.epoch, 1);
    assert!(ck.config_fingerprint.is_some());
    assert_eq!(ck.preprocess_fingerprint, Manifest::load(&m).unwrap().preprocess_fingerprint);
    assert!(run.join("checkpoint_best.ckpt").exists());

    // resume to two epochs: numbering continues in the appended log
    let cfg2 = small_config(dir.path(), json!({"train": {"epochs": 2, "batches_per_epoch": 2, "seed": 4}}));
    let last = run.join("checkpoint_last.ckpt");
    let o = pvseg(&[
        &"train", &"--manifest", &m, &"--folds", &f, &"--fold", &"0", &"--config", &cfg2, &"--out", &run, &"--checkpoint", &last,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let epochs: Vec<u64> = std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![0, 1]);

    let pred = dir.path().join("pred");
    let o = pvseg(&[&"infer", &"--checkpoint", &last, &"--manifest", &m, &"--out", &pred]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pm = Manifest::load(pred.join("manifest.json")).unwrap();
    assert_eq!(pm.cases.len(), 6);
    for c in &pm.cases {
        assert_eq!(c.provenance, Provenance::Pseudo);
        assert!(read_labels(c.labels.as_ref().unwrap()).unwrap().data.iter().all(|&v| v < 3));
    }

    // the raw cohort has no preprocessing fingerprint
    let ev = dir.path().join("ev");
    let pm_path = pred.join("manifest.json");
    let o = pvseg(&[&"evaluate", &"--manifest", &pm_path, &"--reference", &raw, &"--config", &cfg, &"--out", &ev]);
    assert_eq!(code(&o), 1);
    let csv = dir.path().join("table.csv");
    let o = pvseg(&[
        &"evaluate", &"--manifest", &pm_path, &"--reference", &m, &"--config", &cfg, &"--out", &ev, &"--csv", &csv,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    for g in report["groups"].as_array().unwrap() {
        assert!(g["name"].is_string() && g["n"].is_u64());
        for metric in ["dsc", "sen", "ppv"] {
            assert!(g[metric].get("mean").is_some() && g[metric]["excluded"].is_u64());
        }
        assert!(g["clusters"]["pred"].is_number() && g["clusters"]["ref"].is_number());
    }
    assert!(report["config_fingerprint"].is_string());
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("group,n,DSC"));
}

#[test]
fn evaluate_reference_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_cohort(dir.path(), "raw", 5, &["x"], true);
    let cfg = small_config(dir.path(), json!({}));
    let ev = dir.path().join("ev");
    let o = pvseg(&[&"evaluate", &"--manifest", &m, &"--reference", &m, &"--config", &cfg, &"--out", &ev]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let overall = &report["groups"][0];
    assert_eq!(overall["name"], "overall");
    assert_eq!(overall["dsc"]["mean"], 1.0);
    assert_eq!(overall["dsc"]["sd"], 0.0);
    assert_eq!(report["agreement"]["lin_ccc"].as_f64(), Some(1.0));
}

#[test]
fn infer_guards_channels_and_handles_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pvseg_net::NetConfig {
        in_channels: 2,
        stages: 1,
        base_channels: 2,
        patch_size: [8, 8, 8],
        blocks_per_stage: 1,
        ..Default::default()
    };
    let ck = dir.path().join("dual.ckpt");
    checkpoint::save(&checkpoint::Checkpoint::untrained(pvseg_net::build_model(&cfg, 0).unwrap()), &ck).unwrap();
    let m = make_cohort(dir.path(), "raw", 1, &["x"], false);
    let out = dir.path().join("o");
    assert_eq!(code(&pvseg(&[&"infer", &"--checkpoint", &ck, &"--manifest", &m, &"--out", &out])), 1);
    let empty = write_json(&dir.path().join("e.json"), &json!({"cases": []}));
    let o = pvseg(&[&"infer", &"--checkpoint", &ck, &"--manifest", &empty, &"--out", &out]);
    assert_eq!(code(&o), 0);
    assert!(!out.join("predictions").exists());
    assert!(Manifest::load(out.join("manifest.json")).unwrap().cases.is_empty());
}
