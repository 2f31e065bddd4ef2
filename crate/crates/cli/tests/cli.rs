use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use nlran::data::{Class, Manifest, Volume};
use nlran::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_nlran");

fn nlran(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    s(&p)
}

/// Synthesised, preprocessed and trained once for every test that needs a run.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = write_config(&root, r#"{"seed": 5, "phantom_count": 30, "train": {"max_epochs": 2}}"#);
        let raw = s(&root.join("raw"));
        let prep = s(&root.join("prep"));
        let run = s(&root.join("run"));
        assert!(nlran(&["synth", "--config", &config, "--out", &raw]).status.success());
        assert!(nlran(&["preprocess", "--config", &config, "--manifest", &format!("{}/manifest.jsonl", raw), "--out", &prep])
            .status
            .success());
        let o = nlran(&["train", "--config", &config, "--manifest", &format!("{}/manifest.jsonl", prep), "--out", &run]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { _dir: dir, root, config }
    })
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(nlran(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(nlran(&[]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = nlran(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("gradcheck"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"learning_rate": 0.1}"#);
    assert_eq!(nlran(&["synth", "--config", &cfg, "--out", &s(&dir.path().join("x"))]).status.code(), Some(1));
}

#[test]
fn mismatched_network_shape_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"network": {"input_shape": [8, 32, 32]}}"#);
    assert_eq!(nlran(&["--dry-run", "--config", &cfg, "gradcheck"]).status.code(), Some(1));
}

#[test]
fn dry_run_writes_nothing_and_shows_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = nlran(&["--dry-run", "--seed", "42", "synth", "--out", &s(&out)]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("\"seed\": 42"));
    assert!(!out.exists());
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nlran(&["preprocess", "--manifest", &s(&dir.path().join("none.jsonl")), "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_is_balanced_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(nlran(&["synth", "--count", "12", "--seed", "3", "--out", &s(d)]).status.success());
    }
    let m = Manifest::load(a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 12);
    for c in Class::ALL {
        assert_eq!(m.records.iter().filter(|r| r.label == c).count(), 4);
    }
    for r in &m.records {
        assert!(r.lesion_path.is_some() && r.mask_path.is_some());
        assert_eq!(std::fs::read(a.join(&r.path)).unwrap(), std::fs::read(b.join(&r.path)).unwrap());
    }
}

#[test]
fn undersized_scan_fails_alone() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    assert!(nlran(&["synth", "--count", "6", "--out", &s(&raw)]).status.success());
    let mut m = Manifest::load(raw.join("manifest.jsonl")).unwrap();
    let small = Volume::new("small", Tensor::full(&[4, 10, 10], 50.0), Class::Normal).unwrap();
    m.records.push(Manifest::write_volume(&raw, &small, None).unwrap());
    m.save(raw.join("manifest.jsonl")).unwrap();
    let prep = dir.path().join("prep");
    let o = nlran(&["preprocess", "--manifest", &s(&raw.join("manifest.jsonl")), "--out", &s(&prep)]);
    assert_eq!(o.status.code(), Some(2));
    let done = Manifest::load(prep.join("manifest.jsonl")).unwrap();
    assert_eq!(done.records.len(), 6);
    assert!(done.records.iter().all(|r| r.id != "small" && r.split.is_some()));
}

#[test]
fn preprocessing_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    assert!(nlran(&["synth", "--count", "6", "--out", &s(&raw)]).status.success());
    let m = s(&raw.join("manifest.jsonl"));
    for d in ["p1", "p2"] {
        assert!(nlran(&["preprocess", "--manifest", &m, "--out", &s(&dir.path().join(d))]).status.success());
    }
    let p1 = Manifest::load(dir.path().join("p1/manifest.jsonl")).unwrap();
    for r in &p1.records {
        let v = p1.load_volume(r).unwrap();
        assert_eq!(v.extents(), [16, 32, 32]);
        assert_eq!(std::fs::read(dir.path().join("p1").join(&r.path)).unwrap(), std::fs::read(dir.path().join("p2").join(&r.path)).unwrap());
    }
}

#[test]
fn training_writes_run_artifacts() {
    let f = fixture();
    let run = f.root.join("run");
    for p in ["config.json", "checkpoints/best.nlck", "logs/train.jsonl", "reports/train_summary.json"] {
        assert!(run.join(p).exists(), "{}", p);
    }
    let log = std::fs::read_to_string(run.join("logs/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first.get("val_weighted_f1").is_some());
}

#[test]
fn eval_reports_headline_metrics() {
    let f = fixture();
    let out = f.root.join("eval");
    let o = nlran(&[
        "eval",
        "--config",
        &f.config,
        "--checkpoint",
        &s(&f.root.join("run/checkpoints/best.nlck")),
        "--manifest",
        &s(&f.root.join("prep/manifest.jsonl")),
        "--split",
        "val",
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("reports/val_metrics.json")).unwrap()).unwrap();
    for k in ["ACC", "P", "R", "F1", "AUC"] {
        assert!(v.get(k).is_some(), "missing {}", k);
    }
    assert_eq!(v["ACC"], v["R"]);
    let scores = std::fs::read_to_string(out.join("reports/val_scores.csv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "id,label,p_CP,p_NCP,p_Normal");
}

#[test]
fn eval_rejects_unknown_split() {
    let f = fixture();
    let o = nlran(&[
        "eval",
        "--checkpoint",
        &s(&f.root.join("run/checkpoints/best.nlck")),
        "--manifest",
        &s(&f.root.join("prep/manifest.jsonl")),
        "--split",
        "holdout",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn explain_writes_both_heat_maps() {
    let f = fixture();
    let out = f.root.join("explain");
    let m = Manifest::load(f.root.join("prep/manifest.jsonl")).unwrap();
    let scan = &m.records.iter().find(|r| r.label == Class::CP).unwrap().id;
    let o = nlran(&[
        "explain",
        "--config",
        &f.config,
        "--checkpoint",
        &s(&f.root.join("run/checkpoints/best.nlck")),
        "--manifest",
        &s(&f.root.join("prep/manifest.jsonl")),
        "--scan",
        scan,
        "--out",
        &s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("heatmaps").join(scan);
    assert!(dir.join("attention_000.pgm").exists());
    assert!(dir.join("cam_015.pgm").exists());
    assert!(dir.join("attention.csv").exists() && dir.join("summary.json").exists());
    assert!(stdout(&o).contains("attention overlap"));
}

#[test]
fn explain_unknown_scan_is_a_usage_error() {
    let f = fixture();
    let o = nlran(&[
        "explain",
        "--checkpoint",
        &s(&f.root.join("run/checkpoints/best.nlck")),
        "--manifest",
        &s(&f.root.join("prep/manifest.jsonl")),
        "--scan",
        "nope",
        "--out",
        &s(&f.root.join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let f = fixture();
    let bad = f.root.join("bad.nlck");
    std::fs::write(&bad, b"garbage").unwrap();
    let o = nlran(&["inspect", "--checkpoint", &s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_preset_reports_counts() {
    let o = nlran(&["inspect", "--preset", "resmix3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("parameters: 64"));
    assert!(text.contains("64 @ 32x80x80"));
}

#[test]
fn gradcheck_passes() {
    let o = nlran(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("FAIL"));
}
