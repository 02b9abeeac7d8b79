//! Executes one seeded training run and writes its artifact set:
//! history/trace CSVs, final checkpoint, metrics, KL probe and embeddings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mdan::backbone::Model;
use mdan::data::DomainDataset;
use mdan::evaluation::{export_embeddings, kl_probe, KLProbeResult, MetricReport};
use mdan::trainer::{
    checkpoint, embed_windows, evaluate, write_history_csv, write_scheduler_trace_csv,
    ExperimentConfig, TrainState,
};
use mdan::{Error, Result};

use crate::config::Resolved;

/// Embedding rows exported / probed per domain.
pub const EMBED_LIMIT: usize = 512;

/// Everything a finished run leaves behind, plus its headline numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub metrics: MetricReport,
    pub kl: KLProbeResult,
}

fn probe(model: &Model, source: &DomainDataset, target: &DomainDataset) -> Result<f64> {
    let s = embed_windows(model, &source.train, EMBED_LIMIT)?;
    let t = embed_windows(model, &target.train, EMBED_LIMIT)?;
    kl_probe(&s, &t)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train one seed and write its artifacts into `dir`.
pub fn run_single(
    resolved: &Resolved,
    seed: u64,
    source: &DomainDataset,
    target: &DomainDataset,
    dir: &Path,
) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = ExperimentConfig {
        seed,
        ..resolved.experiment.clone()
    };

    let mut state = TrainState::init(source, target, &config)?;
    let before = probe(&state.model, source, target)?;
    state.run(source, target)?;
    let after = probe(&state.model, source, target)?;
    let kl = KLProbeResult {
        before,
        after,
        scenario: format!("{}->{}", config.scenario.source, config.scenario.target),
    };

    write_history_csv(&dir.join("history.csv"), &state.history)?;
    write_scheduler_trace_csv(&dir.join("scheduler_trace.csv"), &state.trace)?;
    checkpoint(&state, &dir.join("final.ckpt"))?;

    let metrics = evaluate(&state.model, target, config.sum_scores)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    std::fs::write(dir.join("metrics.txt"), metrics.to_text())
        .map_err(|e| Error::io(dir.join("metrics.txt"), e))?;
    write_json(&dir.join("kl.json"), &kl)?;

    let s_emb = embed_windows(&state.model, &source.train, EMBED_LIMIT)?;
    let t_emb = embed_windows(&state.model, &target.train, EMBED_LIMIT)?;
    let s_labels: Vec<f64> = source.train.iter().take(s_emb.nrows()).map(|w| w.y).collect();
    let t_labels: Vec<f64> = target.train.iter().take(t_emb.nrows()).map(|w| w.y).collect();
    export_embeddings(
        &dir.join("embeddings.csv"),
        &[
            ("source", &s_labels, &s_emb),
            ("target", &t_labels, &t_emb),
        ],
    )?;

    Ok(RunSummary { seed, metrics, kl })
}

/// Top-level manifest written once per `train` invocation; together with
/// the config and seeds it fully reconstructs the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub dataset: String,
    pub revision: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunPaths>,
}

/// Artifact paths of one seeded sub-run, relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunPaths {
    pub seed: u64,
    pub history: String,
    pub scheduler_trace: String,
    pub checkpoint: String,
    pub metrics: String,
}

impl RunPaths {
    pub fn for_seed(seed: u64) -> Self {
        let dir = format!("seed_{seed}");
        Self {
            seed,
            history: format!("{dir}/history.csv"),
            scheduler_trace: format!("{dir}/scheduler_trace.csv"),
            checkpoint: format!("{dir}/final.ckpt"),
            metrics: format!("{dir}/metrics.json"),
        }
    }
}

pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn run_id(resolved: &Resolved) -> String {
    format!(
        "{}_{}_{}_{}",
        resolved.dataset,
        resolved.experiment.scenario.source,
        resolved.experiment.scenario.target,
        resolved.experiment.ablation.name()
    )
}

fn fmt_cell(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_cell).unwrap_or_default()
}

/// Per-seed rows plus a trailing mean row.
pub fn write_aggregate_csv(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let mut out = String::from("seed,rmse,score_paper,score_nasa,accuracy,n,kl_before,kl_after\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.seed,
            fmt_cell(r.metrics.rmse),
            fmt_cell(r.metrics.score_paper),
            fmt_cell(r.metrics.score_nasa),
            fmt_opt(r.metrics.accuracy),
            r.metrics.n,
            fmt_cell(r.kl.before),
            fmt_cell(r.kl.after),
        ));
    }
    if !runs.is_empty() {
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunSummary) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
        let acc_mean = if runs.iter().all(|r| r.metrics.accuracy.is_some()) {
            Some(mean(&|r: &RunSummary| r.metrics.accuracy.unwrap()))
        } else {
            None
        };
        out.push_str(&format!(
            "mean,{},{},{},{},{},{},{}\n",
            fmt_cell(mean(&|r: &RunSummary| r.metrics.rmse)),
            fmt_cell(mean(&|r: &RunSummary| r.metrics.score_paper)),
            fmt_cell(mean(&|r: &RunSummary| r.metrics.score_nasa)),
            fmt_opt(acc_mean),
            runs[0].metrics.n,
            fmt_cell(mean(&|r: &RunSummary| r.kl.before)),
            fmt_cell(mean(&|r: &RunSummary| r.kl.after)),
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `out/seed_<s>` sub-directory for one seed.
pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}
