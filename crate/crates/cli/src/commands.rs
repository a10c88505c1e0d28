//! The `gen-data`, `train`, `eval` and `gradcheck` commands, plus the
//! in-memory experiment shared with `sweep`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use dwdr::gradcheck::{run_suite, GradCheckReport};
use dwdr::model::Model;
use dwdr::retrieval::{
    evaluate_bidirectional, offdiag_stats, read_embeddings, write_embeddings, EmbeddingSet, OffDiagStats,
    RetrievalMetrics,
};
use dwdr::synthdata::{generate_dataset, split_train_test};
use dwdr::trainer::{embed_dataset, train, EpochLog};
use dwdr::{CrossViewDataset, Rng};

use crate::config::RunConfig;
use crate::error::CliError;

/// Random stream for data generation (training uses streams 0 to 3).
const DATA_STREAM: u64 = 100;

pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const TEST_MANIFEST: &str = "test.manifest";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS: &str = "metrics.json";
pub const EMBEDDINGS: &str = "embeddings.txt";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        }
    }
    let f = File::create(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

/// Train and test splits of the synthetic dataset for `cfg.seed`.
pub fn generate_split(cfg: &RunConfig) -> Result<(CrossViewDataset, CrossViewDataset), CliError> {
    let spec = cfg.synth_spec();
    let ds = generate_dataset(&spec, &Rng::new(cfg.seed, DATA_STREAM))?;
    Ok(split_train_test(&ds, &spec)?)
}

fn describe(name: &str, ds: &CrossViewDataset) -> String {
    format!(
        "{name}: {} classes, {} satellite items, {} drone items",
        ds.num_classes(),
        ds.num_satellite_items(),
        ds.num_drone_items()
    )
}

pub fn gen_data(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let (train, test) = generate_split(cfg)?;
    for (name, ds) in [(TRAIN_MANIFEST, &train), (TEST_MANIFEST, &test)] {
        let path = cfg.out_dir.join(name);
        let mut w = create(&path)?;
        ds.write_manifest(&mut w).map_err(|e| CliError::from(e).context(path.display()))?;
        w.flush()?;
    }
    Ok(vec![describe("train", &train), describe("test", &test)])
}

pub fn read_manifest(path: &Path) -> Result<CrossViewDataset, CliError> {
    CrossViewDataset::read_manifest(open(path)?).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn read_checkpoint(path: &Path) -> Result<Model, CliError> {
    Model::read_checkpoint(open(path)?).map_err(|e| CliError::from(e).context(path.display()))
}

/// Trains on `manifest` (default `<out>/train.manifest`) and writes the
/// checkpoint and JSON-lines log.
pub fn train_cmd(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Vec<String>, CliError> {
    let path = manifest.map_or_else(|| cfg.out_dir.join(TRAIN_MANIFEST), Path::to_path_buf);
    let ds = read_manifest(&path)?;
    let (model, logs) = train(&cfg.train_config(), &ds)?;
    let ckpt = cfg.out_dir.join(CHECKPOINT);
    let mut w = create(&ckpt)?;
    model.write_checkpoint(&mut w)?;
    w.flush()?;
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut w = create(&log_path)?;
    for row in &logs {
        let line = serde_json::to_string(row).map_err(|e| CliError::io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    let mut out = vec![format!("trained {} epochs on {}", logs.len(), path.display())];
    if let Some(last) = logs.last() {
        out.push(format!(
            "final epoch: l_id {:.6} l_dwdr {:.6} l_total {:.6} mean |rho_offdiag| {:.4}",
            last.l_id, last.l_dwdr, last.l_total, last.mean_abs_offdiag_rho
        ));
    }
    out.push(format!("wrote {} and {}", ckpt.display(), log_path.display()));
    Ok(out)
}

/// Metrics of one retrieval direction as written to JSON.
pub fn direction_json(m: &RetrievalMetrics) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("direction".into(), json!(m.direction));
    for (k, v) in &m.recall_at {
        obj.insert(format!("R@{k}"), json!(v));
    }
    obj.insert("R@top1percent".into(), json!(m.recall_top1_percent));
    obj.insert("AP".into(), json!(m.ap));
    obj.insert("num_queries".into(), json!(m.num_queries));
    obj.insert("skipped".into(), json!(m.skipped));
    Value::Object(obj)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub drone_to_satellite: RetrievalMetrics,
    pub satellite_to_drone: RetrievalMetrics,
    pub offdiag: OffDiagStats,
}

impl Evaluation {
    pub fn to_json(&self) -> Value {
        json!({
            "directions": [direction_json(&self.drone_to_satellite), direction_json(&self.satellite_to_drone)],
            "offdiag": self.offdiag,
        })
    }
}

pub fn evaluate_sets(cfg: &RunConfig, sat: &EmbeddingSet, drone: &EmbeddingSet) -> Result<Evaluation, CliError> {
    let (d2s, s2d) = evaluate_bidirectional(sat, drone, &cfg.eval.ks)?;
    let offdiag = offdiag_stats(sat, drone, cfg.train.dwdr.eps, cfg.eval.tau)?;
    Ok(Evaluation { drone_to_satellite: d2s, satellite_to_drone: s2d, offdiag })
}

pub enum EvalSource<'a> {
    Checkpoint { checkpoint: Option<&'a Path>, manifest: Option<&'a Path> },
    Embeddings(&'a Path),
}

/// Evaluates a checkpoint on a manifest (or a ready embedding file) and
/// writes `metrics.json`; returns the JSON document.
pub fn eval_cmd(cfg: &RunConfig, source: EvalSource<'_>) -> Result<Value, CliError> {
    let (sat, drone) = match source {
        EvalSource::Embeddings(path) => {
            read_embeddings(open(path)?).map_err(|e| CliError::from(e).context(path.display()))?
        }
        EvalSource::Checkpoint { checkpoint, manifest } => {
            let ckpt: PathBuf = checkpoint.map_or_else(|| cfg.out_dir.join(CHECKPOINT), Path::to_path_buf);
            let man: PathBuf = manifest.map_or_else(|| cfg.out_dir.join(TEST_MANIFEST), Path::to_path_buf);
            let model = read_checkpoint(&ckpt)?;
            let ds = read_manifest(&man)?;
            if model.encoder.input_dim() != ds.dim() {
                return Err(CliError::config(format!(
                    "checkpoint expects {} input features but {} has {}",
                    model.encoder.input_dim(),
                    man.display(),
                    ds.dim()
                )));
            }
            let (sat, drone) = embed_dataset(&model, &ds, cfg.train.retrieval_feature)?;
            let emb_path = cfg.out_dir.join(EMBEDDINGS);
            let mut w = create(&emb_path)?;
            write_embeddings(&mut w, &[&sat, &drone])?;
            w.flush()?;
            (sat, drone)
        }
    };
    let doc = evaluate_sets(cfg, &sat, &drone)?.to_json();
    let path = cfg.out_dir.join(METRICS);
    let mut w = create(&path)?;
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::io(e.to_string()))?;
    writeln!(w, "{text}")?;
    w.flush()?;
    Ok(doc)
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> GradCheckReport {
    let gc = dwdr::gradcheck::GradCheckConfig { seed: cfg.seed, ..cfg.gradcheck };
    run_suite(&gc)
}

pub fn format_gradcheck(report: &GradCheckReport) -> Vec<String> {
    report
        .checks
        .iter()
        .map(|c| {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let mut line = format!(
                "{status} {:<13} instances={} max_rel_err={:.3e} max_abs_err={:.3e} rel_tol={:.0e} five_point_rel_err={:.3e}",
                c.name, c.instances, c.max_rel_err, c.max_abs_err, c.rel_tol, c.five_point_rel_err
            );
            if let Some(e) = &c.error {
                line.push_str(&format!(" error: {e}"));
            }
            line
        })
        .collect()
}

/// Result of generating data, training and evaluating in memory.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub evaluation: Evaluation,
    pub logs: Vec<EpochLog>,
}

/// The full pipeline for one seed without touching the file system. Matches
/// `gen-data`, `train` and `eval` run in sequence with the same config.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunResult, CliError> {
    cfg.validate()?;
    let (train_ds, test_ds) = generate_split(cfg)?;
    let (model, logs) = train(&cfg.train_config(), &train_ds)?;
    let (sat, drone) = embed_dataset(&model, &test_ds, cfg.train.retrieval_feature)?;
    Ok(RunResult { seed: cfg.seed, evaluation: evaluate_sets(cfg, &sat, &drone)?, logs })
}
