//! `mdan train`: one scenario, one or more seeds, full artifact set.

use std::path::PathBuf;

use mdan::{Error, Result};

use crate::config::{self, Overrides};
use crate::runner::{
    git_revision, run_id, run_single, seed_dir, write_aggregate_csv, write_json, Manifest,
    RunPaths,
};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Output directory for run artifacts.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let resolved = config::resolve(&args.overrides)?;
    let (source, target) = config::load_pair(&resolved)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    log::info!(
        "training {} {} -> {} ({}), {} seed(s)",
        resolved.dataset,
        source.name,
        target.name,
        resolved.experiment.ablation.name(),
        resolved.seeds.len()
    );

    let mut runs = Vec::new();
    let mut run_dirs = Vec::new();
    for &seed in &resolved.seeds {
        let dir = seed_dir(&args.out, seed);
        log::info!("seed {seed} -> {}", dir.display());
        let summary = run_single(&resolved, seed, &source, &target, &dir)?;
        println!(
            "seed {seed}: rmse {:.4}, score(nasa) {:.4}{}",
            summary.metrics.rmse,
            summary.metrics.score_nasa,
            summary
                .metrics
                .accuracy
                .map(|a| format!(", accuracy {:.4}", a))
                .unwrap_or_default()
        );
        run_dirs.push(RunPaths::for_seed(seed));
        runs.push(summary);
    }

    write_aggregate_csv(&args.out.join("aggregate.csv"), &runs)?;
    let manifest = Manifest {
        run_id: run_id(&resolved),
        dataset: resolved.dataset.to_string(),
        revision: git_revision(),
        config: resolved.experiment.clone(),
        seeds: resolved.seeds.clone(),
        runs: run_dirs,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;

    let n = runs.len() as f64;
    println!(
        "mean over {} seed(s): rmse {:.4}, score(nasa) {:.4}",
        runs.len(),
        runs.iter().map(|r| r.metrics.rmse).sum::<f64>() / n,
        runs.iter().map(|r| r.metrics.score_nasa).sum::<f64>() / n,
    );
    Ok(())
}
