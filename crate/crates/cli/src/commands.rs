//! Subcommand implementations. Each takes a resolved configuration and
//! explicit paths so it can be driven from tests as well as `main`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use nlran::data::{generate_phantom, preprocess, split, Class, Manifest, Split};
use nlran::explain::{explain, overlap_score, write_csv, write_pgm_stack, ExplainOptions, Overlap};
use nlran::gradcheck::{suite, CheckResult, SUITE_TOLERANCE};
use nlran::model::{Checkpoint, NetworkPlan, StageShape};
use nlran::trainer::{evaluate, train, Dataset, EpochLog, TrainLog};
use nlran::{Model, NetworkConfig};
use serde::{Deserialize, Serialize};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{Cli, Command, Method, Preset};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.nlck";
pub const TRAIN_LOG: &str = "logs/train.jsonl";
pub const MANIFEST: &str = "manifest.jsonl";

fn default_out(cmd: &Command) -> PathBuf {
    PathBuf::from(match cmd {
        Command::Synth { .. } => "data/phantoms",
        Command::Preprocess { .. } => "data/processed",
        _ => "runs/latest",
    })
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let count = match &cli.command {
        Command::Synth { count } => *count,
        _ => None,
    };
    let ov = Overrides { seed: cli.seed, deterministic: cli.deterministic, count };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
    let out = cli.out.clone().unwrap_or_else(|| default_out(&cli.command));
    if cli.dry_run {
        println!("{}", cfg.to_pretty_json());
        println!("# command: {:?}\n# output: {}", cli.command, out.display());
        return Ok(());
    }
    match &cli.command {
        Command::Synth { .. } => {
            let m = cmd_synth(&cfg, &out)?;
            println!("wrote {} phantoms to {}", m.records.len(), out.display());
        }
        Command::Preprocess { manifest } => {
            let m = cmd_preprocess(&cfg, manifest, &out)?;
            println!("wrote {} preprocessed scans to {}", m.records.len(), out.display());
        }
        Command::Train { manifest } => {
            let log = cmd_train(&cfg, manifest, &out)?;
            println!(
                "best epoch {} (validation weighted F1 {:.4}), checkpoint {}",
                log.best_epoch,
                log.best_metric,
                out.join(BEST_CHECKPOINT).display()
            );
        }
        Command::Eval { checkpoint, manifest, split } => {
            let split: Split = split.parse().map_err(|e: nlran::Error| CliError::Usage(e.to_string()))?;
            let s = cmd_eval(&cfg, checkpoint, manifest, split, &out)?;
            println!("{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}", "split", "ACC", "P", "R", "F1", "AUC");
            println!(
                "{:<8} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}",
                s.split,
                s.acc,
                s.p,
                s.r,
                s.f1,
                s.auc.map_or("n/a".to_string(), |a| format!("{:.4}", a))
            );
        }
        Command::Explain { checkpoint, manifest, scan, method } => {
            let s = cmd_explain(&cfg, checkpoint, manifest, scan, *method, &out)?;
            println!("{} predicted {} ({} files)", s.scan, s.predicted, s.files.len());
            for (name, o) in [("attention", s.attention_overlap), ("cam", s.cam_overlap)] {
                if let Some(o) = o {
                    println!("{} overlap: difference {:.4}, voxel AUC {:.4}", name, o.difference, o.auc);
                }
            }
        }
        Command::Gradcheck => {
            let results = suite(cfg.seed)?;
            print_gradcheck(&results);
            gradcheck_verdict(&results)?;
        }
        Command::Inspect { checkpoint, preset } => {
            let net = match (checkpoint, preset) {
                (Some(p), _) => Checkpoint::load(p)?.model.config().clone(),
                (None, Some(p)) => preset_config(*p),
                (None, None) => cfg.network.clone(),
            };
            let s = cmd_inspect(&net)?;
            for row in &s.stages {
                let [_, c, d, h, w] = row.shape;
                println!("{:<22} {:>6} @ {}x{}x{}", row.layer, c, d, h, w);
            }
            println!("parameters: {}", s.parameters);
            println!("multiply-adds per sample: {}", s.multiply_adds);
        }
    }
    Ok(())
}

pub fn preset_config(p: Preset) -> NetworkConfig {
    match p {
        Preset::Desk => NetworkConfig::desk(),
        Preset::Resnet => NetworkConfig::desk().resnet_baseline(),
        Preset::Resmix3 => NetworkConfig::full_resmix3(),
        Preset::Resmix6 => NetworkConfig::full_resmix6(),
    }
}

fn write_snapshot(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_SNAPSHOT), cfg.to_pretty_json() + "\n")?;
    Ok(())
}

/// Phantom volumes, lung and lesion masks, and a manifest under `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<Manifest> {
    let mut records = Vec::with_capacity(cfg.phantom_count);
    for i in 0..cfg.phantom_count {
        let p = generate_phantom(&cfg.phantoms, i, Class::ALL[i % 3])?;
        records.push(Manifest::write_volume(out, &p.volume, None)?);
    }
    let m = Manifest::new(records, out)?;
    m.save(out.join(MANIFEST))?;
    write_snapshot(cfg, out)?;
    info!("synthesised {} phantoms in {}", m.records.len(), out.display());
    Ok(m)
}

/// Preprocess every scan; failures are logged and skipped. Records without a
/// split are assigned one. Returns an error after writing if any scan failed.
pub fn cmd_preprocess(cfg: &RunConfig, manifest: &Path, out: &Path) -> CliResult<Manifest> {
    let src = Manifest::load(manifest)?;
    fs::create_dir_all(out)?;
    let mut records = Vec::new();
    let mut failed = 0;
    for r in &src.records {
        let result = src.load_volume(r).and_then(|v| preprocess(&v, &cfg.preprocess));
        match result {
            Ok(v) => records.push(Manifest::write_volume(out, &v, r.split)?),
            Err(e) => {
                error!("{}: {}", r.id, e);
                failed += 1;
            }
        }
    }
    let mut m = Manifest::new(records, out)?;
    if m.records.iter().any(|r| r.split.is_none()) && m.records.len() >= 3 {
        m = split(&m, cfg.split_ratios, cfg.seed)?;
    }
    m.save(out.join(MANIFEST))?;
    if failed > 0 {
        return Err(CliError::PartialFailure { failed, total: src.records.len() });
    }
    Ok(m)
}

fn with_splits(m: Manifest, cfg: &RunConfig) -> CliResult<Manifest> {
    if m.records.iter().any(|r| r.split.is_none()) {
        warn!("manifest has unassigned records; splitting with seed {}", cfg.seed);
        return Ok(split(&m, cfg.split_ratios, cfg.seed)?);
    }
    Ok(m)
}

/// Dataset of one split, checked against the network's input shape.
pub fn load_split(m: &Manifest, s: Split, net: &NetworkConfig) -> CliResult<Dataset> {
    let vols = m.in_split(s).map(|r| m.load_volume(r)).collect::<nlran::Result<Vec<_>>>()?;
    for v in &vols {
        if v.extents() != net.input_shape {
            return Err(CliError::Core(nlran::Error::Data(format!(
                "{}: shape {:?} does not match network input {:?}; run preprocess first",
                v.id,
                v.extents(),
                net.input_shape
            ))));
        }
    }
    Ok(Dataset::from_volumes(&vols)?)
}

pub fn cmd_train(cfg: &RunConfig, manifest: &Path, run_dir: &Path) -> CliResult<TrainLog> {
    let m = with_splits(Manifest::load(manifest)?, cfg)?;
    let tr = load_split(&m, Split::Train, &cfg.network)?;
    let va = load_split(&m, Split::Val, &cfg.network)?;
    info!("training on {} scans, validating on {}", tr.len(), va.len());
    write_snapshot(cfg, run_dir)?;
    for d in ["checkpoints", "logs", "reports"] {
        fs::create_dir_all(run_dir.join(d))?;
    }
    let mut log_file = fs::File::create(run_dir.join(TRAIN_LOG))?;
    let model = Model::build(&cfg.network, cfg.seed)?;
    let outcome = train(model, &tr, &va, &cfg.train, |e: &EpochLog| {
        info!(
            "epoch {:>3} loss {:.4} train acc {:.3} val acc {:.3} val F1 {:.3}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy, e.val_weighted_f1
        );
        writeln!(log_file, "{}", serde_json::to_string(e)?)?;
        Ok(())
    })?;
    outcome.best.save(run_dir.join(BEST_CHECKPOINT))?;
    let summary = serde_json::json!({
        "best_epoch": outcome.log.best_epoch,
        "best_val_weighted_f1": outcome.log.best_metric,
        "epochs_run": outcome.log.epochs.len(),
        "stop": outcome.log.stop,
        "checkpoint": BEST_CHECKPOINT,
    });
    fs::write(run_dir.join("reports/train_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(outcome.log)
}

/// The headline columns plus the full report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
    pub report: nlran::metrics::MetricsReport,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, s: Split, run_dir: &Path) -> CliResult<EvalSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let m = with_splits(Manifest::load(manifest)?, cfg)?;
    let ds = load_split(&m, s, ck.model.config())?;
    let ev = evaluate(&ck.model, &ds, cfg.train.batch_size, cfg.train.intensity_scale)?;
    let reports = run_dir.join("reports");
    fs::create_dir_all(&reports)?;
    let r = &ev.report;
    let summary = EvalSummary {
        split: s,
        acc: r.accuracy,
        p: r.weighted_precision,
        r: r.weighted_recall,
        f1: r.weighted_f1,
        auc: r.weighted_auc,
        report: r.clone(),
    };
    fs::write(reports.join(format!("{}_metrics.json", s)), serde_json::to_string_pretty(&summary)? + "\n")?;
    let ovr = nlran::metrics::one_vs_rest(&ev.labels, r.class_names.len())?;
    for (c, name) in r.class_names.iter().enumerate() {
        let scores: Vec<f64> = ev.scores.iter().map(|row| row[c]).collect();
        match nlran::metrics::roc_curve(&scores, &ovr[c]) {
            Ok(curve) => curve.save_csv(reports.join(format!("{}_roc_{}.csv", s, name)))?,
            Err(e) => warn!("no ROC curve for {}: {}", name, e),
        }
        match nlran::metrics::pr_curve(&scores, &ovr[c]) {
            Ok(curve) => curve.save_csv(reports.join(format!("{}_pr_{}.csv", s, name)))?,
            Err(e) => warn!("no PR curve for {}: {}", name, e),
        }
    }
    let mut f = fs::File::create(reports.join(format!("{}_scores.csv", s)))?;
    writeln!(f, "id,label,{}", r.class_names.iter().map(|n| format!("p_{}", n)).collect::<Vec<_>>().join(","))?;
    for ((id, &l), row) in ev.ids.iter().zip(&ev.labels).zip(&ev.scores) {
        let ps: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        writeln!(f, "{},{},{}", id, r.class_names[l], ps.join(","))?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub scan: String,
    pub label: Class,
    pub predicted: String,
    pub files: Vec<PathBuf>,
    pub attention_overlap: Option<Overlap>,
    pub cam_overlap: Option<Overlap>,
}

pub fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    scan: &str,
    method: Method,
    run_dir: &Path,
) -> CliResult<ExplainSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let m = Manifest::load(manifest)?;
    let rec = m
        .records
        .iter()
        .find(|r| r.id == scan)
        .ok_or_else(|| CliError::Usage(format!("scan {:?} is not in {}", scan, manifest.display())))?;
    let v = m.load_volume(rec)?;
    let net = ck.model.config();
    if v.extents() != net.input_shape {
        return Err(CliError::Core(nlran::Error::Data(format!(
            "{}: shape {:?} does not match network input {:?}",
            v.id,
            v.extents(),
            net.input_shape
        ))));
    }
    let [d, h, w] = v.extents();
    let x = v.voxels.map(|a| a * cfg.train.intensity_scale).reshape(&[1, 1, d, h, w])?;
    let opts = ExplainOptions {
        attention: method != Method::Cam,
        cam: method != Method::Attention,
        ..Default::default()
    };
    let ex = explain(&ck.model, &x, &v.id, &opts)?;
    let dir = run_dir.join("heatmaps").join(&v.id);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut overlaps = [None, None];
    for (k, (name, heat)) in [("attention", &ex.attention), ("cam", &ex.cam)].into_iter().enumerate() {
        if let Some(hm) = heat {
            files.extend(write_pgm_stack(&hm.values, &dir, name)?);
            let csv = dir.join(format!("{}.csv", name));
            write_csv(&hm.values, &csv)?;
            files.push(csv);
            if let Some(lesion) = &v.lesion {
                overlaps[k] = overlap_score(&hm.values, lesion).ok();
            }
        }
    }
    let predicted = Class::from_index(ex.predicted).map(|c| c.to_string()).unwrap_or_else(|_| ex.predicted.to_string());
    let summary = ExplainSummary {
        scan: v.id.clone(),
        label: v.label,
        predicted,
        files,
        attention_overlap: overlaps[0],
        cam_overlap: overlaps[1],
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

pub fn print_gradcheck(results: &[CheckResult]) {
    println!("{:<36} {:>8} {:>12}  result", "check", "inputs", "max rel err");
    for r in results {
        println!("{:<36} {:>8} {:>12.3e}  {}", r.name, r.inputs, r.max_rel_error, if r.passed { "pass" } else { "FAIL" });
    }
}

/// Numeric error when any check exceeds the tolerance.
pub fn gradcheck_verdict(results: &[CheckResult]) -> CliResult<()> {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Core(nlran::Error::Numeric(format!(
            "gradient checks above {:e}: {}",
            SUITE_TOLERANCE,
            failed.join(", ")
        ))))
    }
}

pub fn cmd_gradcheck(seed: u64) -> CliResult<Vec<CheckResult>> {
    let results = suite(seed)?;
    gradcheck_verdict(&results)?;
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct InspectSummary {
    pub stages: Vec<StageShape>,
    pub parameters: u64,
    pub multiply_adds: u64,
}

pub fn cmd_inspect(net: &NetworkConfig) -> CliResult<InspectSummary> {
    let plan = NetworkPlan::new(net)?;
    Ok(InspectSummary { stages: plan.shape_walk(1)?, parameters: plan.count_params(), multiply_adds: plan.count_flops(1)? })
}
