use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
    "seeds": [3],
    "data": {"kind": "blobs", "classes": 3, "dim": 6, "train_per_class": 30,
             "val_per_class": 15, "test_per_class": 15, "ood_per_class": 15,
             "separation": 6.0},
    "train": {"epochs": 10, "batch_size": 32, "embed_dim": 8}
}"#;

fn volta(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volta"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_from_synth_to_ood() {
    let dir = setup();
    let d = dir.path();
    ok(&volta(d, &["--config", "cfg.json", "--out", "data", "synth", "--format", "binary"]));
    for f in ["train", "val", "test", "ood"] {
        assert!(d.join(format!("data/{f}.vfea")).exists());
    }
    ok(&volta(d, &["--config", "cfg.json", "--out", "m", "train", "--train", "data/train.vfea", "--val", "data/val.vfea"]));
    assert!(d.join("m/model.json").exists() && d.join("m/history.csv").exists());
    ok(&volta(d, &["--config", "cfg.json", "--out", "c", "calibrate", "--model", "m/model.json", "--val", "data/val.vfea"]));
    assert!(d.join("c/calibration.json").exists());
    let eval = volta(d, &["--config", "cfg.json", "--out", "e", "evaluate", "--model", "c/model.json",
        "--test", "data/test.vfea", "--ood", "data/ood.vfea"]);
    ok(&eval);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("accuracy,"));
    assert!(d.join("e/curves/roc.csv").exists());
    let ood = volta(d, &["--config", "cfg.json", "--out", "o", "ood", "--model", "c/model.json"]);
    ok(&ood);
    assert!(String::from_utf8_lossy(&ood.stdout).starts_with("AUROC"));
}

#[test]
fn report_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    ok(&volta(d, &["--config", "cfg.json", "--out", "r1", "report"]));
    ok(&volta(d, &["--config", "cfg.json", "--out", "r2", "report"]));
    let a = std::fs::read(d.join("r1/manifest.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("r2/manifest.json")).unwrap());
    assert!(d.join("r1/comparison.csv").exists());
}

#[test]
fn compare_and_seed_override() {
    let dir = setup();
    let d = dir.path();
    let o = volta(d, &["--config", "cfg.json", "--seed", "11", "--out", "cmp", "compare"]);
    ok(&o);
    let csv = std::fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    assert!(csv.starts_with("method,metric,mean,std,t,dof,p"));
    assert!(csv.contains("n/a (single seed)"));
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.json"), r#"{"data": {"kind": "blobs"}, "extra": 1}"#).unwrap();
    let o = volta(dir.path(), &["--config", "bad.json", "compare"]);
    assert_eq!(o.status.code(), Some(2));
    let missing = volta(dir.path(), &["--config", "cfg.json", "evaluate", "--model", "nope.json"]);
    assert!(!missing.status.success());
}
