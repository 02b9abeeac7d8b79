//! `mdan sweep`: a grid of scenarios x ablations x seeds with aggregate
//! tables. Individual cell failures are recorded and the sweep continues.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::Deserialize;

use mdan::data::DomainDataset;
use mdan::trainer::{AblationFlags, Scenario};
use mdan::{Error, Result};

use crate::config::{self, DatasetKind, PartialExperiment, Resolved, SyntheticSection};
use crate::runner::{run_single, seed_dir, RunSummary};

#[derive(Debug, clap::Args)]
pub struct SweepArgs {
    /// Sweep spec file (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root; falls back to the spec file, then MDAN_DATA_ROOT.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    /// Defaults to 3 seeds (5 for the bearing dataset) when omitted.
    pub seeds: Option<Vec<u64>>,
    pub ablations: Vec<String>,
    pub scenarios: Vec<Scenario>,
    pub synthetic: Option<SyntheticSection>,
    pub experiment: PartialExperiment,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            data_dir: None,
            seeds: None,
            ablations: vec!["none".into()],
            scenarios: Vec::new(),
            synthetic: None,
            experiment: PartialExperiment::default(),
        }
    }
}

pub fn default_seeds(dataset: DatasetKind) -> Vec<u64> {
    match dataset {
        DatasetKind::Mfd => vec![0, 1, 2, 3, 4],
        _ => vec![0, 1, 2],
    }
}

pub fn load_spec(path: &std::path::Path) -> Result<SweepSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut spec: SweepSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if spec.seeds.is_none() {
        spec.seeds = Some(default_seeds(spec.dataset.parse()?));
    }
    if spec.scenarios.is_empty() {
        return Err(Error::Config(format!(
            "{}: sweep spec lists no scenarios",
            path.display()
        )));
    }
    if spec.seeds.as_deref().is_some_and(|s| s.is_empty()) {
        return Err(Error::Config(format!(
            "{}: sweep spec lists no seeds",
            path.display()
        )));
    }
    for a in &spec.ablations {
        AblationFlags::from_name(a)?;
    }
    Ok(spec)
}

struct CellResult {
    scenario: Scenario,
    ablation: String,
    runs: Vec<RunSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let dataset: DatasetKind = spec.dataset.parse()?;
    let seeds = spec.seeds.clone().expect("seeds defaulted in load_spec");
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let data_dir = args
        .data_dir
        .clone()
        .or(spec.data_dir.clone())
        .or_else(|| std::env::var_os(config::DATA_ROOT_ENV).map(PathBuf::from));
    let synthetic = spec.synthetic.clone().unwrap_or_default();

    let mut results: Vec<CellResult> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    // Domain pairs cached per scenario, shared across ablations and seeds.
    let mut pairs: BTreeMap<String, (DomainDataset, DomainDataset)> = BTreeMap::new();

    for scenario in &spec.scenarios {
        for ablation in &spec.ablations {
            let cell = format!("{}->{}/{}", scenario.source, scenario.target, ablation);
            log::info!("sweep cell {cell}");
            let mut partial = spec.experiment.clone();
            partial.ablation = Some(ablation.clone());
            let experiment = match config::resolve_cell(dataset, scenario, &partial) {
                Ok(e) => e,
                Err(e) => {
                    log::error!("{cell}: {e}");
                    failures.push(format!("{},{},-,\"{e}\"", scenario.source, scenario.target));
                    continue;
                }
            };
            let resolved = Resolved {
                dataset,
                data_dir: data_dir.clone(),
                synthetic: synthetic.clone(),
                experiment,
                seeds: seeds.clone(),
            };
            let key = format!("{}->{}", scenario.source, scenario.target);
            if !pairs.contains_key(&key) {
                match config::load_pair(&resolved) {
                    Ok(p) => {
                        pairs.insert(key.clone(), p);
                    }
                    Err(e) => {
                        log::error!("{cell}: {e}");
                        failures
                            .push(format!("{},{},-,\"{e}\"", scenario.source, scenario.target));
                        continue;
                    }
                }
            }
            let (source, target) = &pairs[&key];

            let cell_dir = args.out.join(format!(
                "{}_{}_{ablation}",
                scenario.source, scenario.target
            ));
            let mut runs = Vec::new();
            for &seed in &seeds {
                let dir = seed_dir(&cell_dir, seed);
                match run_single(&resolved, seed, source, target, &dir) {
                    Ok(summary) => runs.push(summary),
                    Err(e) => {
                        log::error!("{cell} seed {seed}: {e}");
                        failures.push(format!(
                            "{},{},{seed},\"{e}\"",
                            scenario.source, scenario.target
                        ));
                    }
                }
            }
            if !runs.is_empty() {
                results.push(CellResult {
                    scenario: scenario.clone(),
                    ablation: ablation.clone(),
                    runs,
                });
            }
        }
    }

    write_long_csv(&args.out.join("results.csv"), &results)?;
    write_pivot_csv(&args.out.join("table.csv"), &spec, &results)?;
    if !failures.is_empty() {
        let mut text = String::from("source,target,seed,error\n");
        for f in &failures {
            text.push_str(f);
            text.push('\n');
        }
        let path = args.out.join("failures.csv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        log::warn!("{} cell/seed failure(s), see failures.csv", failures.len());
    }
    if results.is_empty() {
        return Err(Error::Empty("every sweep cell failed".into()));
    }
    println!(
        "sweep finished: {} cell(s), {} failure(s); tables in {}",
        results.len(),
        failures.len(),
        args.out.display()
    );
    Ok(())
}

/// One row per (scenario, ablation, seed).
fn write_long_csv(path: &std::path::Path, results: &[CellResult]) -> Result<()> {
    let mut out =
        String::from("source,target,ablation,seed,rmse,score_paper,score_nasa,accuracy,kl_before,kl_after\n");
    for cell in results {
        for r in &cell.runs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                cell.scenario.source,
                cell.scenario.target,
                cell.ablation,
                r.seed,
                r.metrics.rmse,
                r.metrics.score_paper,
                r.metrics.score_nasa,
                r.metrics.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                r.kl.before,
                r.kl.after,
            ));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Scenario rows x ablation columns. Regression cells hold mean RMSE;
/// classification cells hold mean +/- stdev accuracy in percent.
fn write_pivot_csv(path: &std::path::Path, spec: &SweepSpec, results: &[CellResult]) -> Result<()> {
    let mut out = String::from("scenario");
    for a in &spec.ablations {
        out.push(',');
        out.push_str(a);
    }
    out.push('\n');
    for scenario in &spec.scenarios {
        out.push_str(&format!("{}->{}", scenario.source, scenario.target));
        for a in &spec.ablations {
            out.push(',');
            let cell = results
                .iter()
                .find(|c| &c.scenario == scenario && &c.ablation == a);
            if let Some(c) = cell {
                let accs: Option<Vec<f64>> =
                    c.runs.iter().map(|r| r.metrics.accuracy).collect();
                match accs {
                    Some(accs) => {
                        let (m, s) = mean_std(&accs);
                        out.push_str(&format!("{:.2}+/-{:.2}", m * 100.0, s * 100.0));
                    }
                    None => {
                        let rmses: Vec<f64> = c.runs.iter().map(|r| r.metrics.rmse).collect();
                        out.push_str(&format!("{:.4}", mean_std(&rmses).0));
                    }
                }
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
