//! Config file schema and the override chain: command line > config file >
//! built-in scenario defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mdan::backbone::BackboneConfig;
use mdan::data::{
    load_cmapss_with, load_mfd_with, make_synthetic_pair_with, CmapssOptions, CmapssSubset,
    DomainDataset, MfdCondition, MfdOptions, ShiftSpec, SyntheticSpec, Task,
};
use mdan::objectives::LossWeights;
use mdan::trainer::{AblationFlags, ExperimentConfig, Scenario, SchedulerSettings};
use mdan::{Error, Result};

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "MDAN_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cmapss,
    Mfd,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cmapss" => Ok(DatasetKind::Cmapss),
            "mfd" => Ok(DatasetKind::Mfd),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected cmapss, mfd, synthetic)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Cmapss => "cmapss",
            DatasetKind::Mfd => "mfd",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

/// Synthetic-pair generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    pub classification: bool,
    pub shift_scale: f64,
    pub shift_offset: f64,
    pub shift_noise: f64,
    pub num_units: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub channels: usize,
    pub window: usize,
    pub step: usize,
    pub rul_cap: f64,
    pub base_noise: f64,
    pub train_fraction: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            seed: 0,
            classification: false,
            shift_scale: 2.0,
            shift_offset: 1.0,
            shift_noise: 0.05,
            num_units: spec.num_units,
            min_len: spec.min_len,
            max_len: spec.max_len,
            channels: spec.channels,
            window: spec.window,
            step: spec.step,
            rul_cap: spec.rul_cap,
            base_noise: spec.base_noise,
            train_fraction: spec.train_fraction,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            task: if self.classification {
                Task::Classification { num_classes: 3 }
            } else {
                Task::Regression
            },
            num_units: self.num_units,
            min_len: self.min_len,
            max_len: self.max_len,
            channels: self.channels,
            window: self.window,
            step: self.step,
            rul_cap: self.rul_cap,
            base_noise: self.base_noise,
            train_fraction: self.train_fraction,
        }
    }

    pub fn shift(&self) -> ShiftSpec {
        ShiftSpec {
            scale: self.shift_scale,
            offset: self.shift_offset,
            noise_std: self.shift_noise,
        }
    }
}

/// Experiment fields as written in a config file: anything omitted falls
/// back to the scenario defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartialExperiment {
    pub scenario: Option<Scenario>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weights: Option<LossWeights>,
    pub beta_alpha: Option<f64>,
    pub mask_prob: Option<f64>,
    pub scheduler: Option<SchedulerSettings>,
    pub rul_cap: Option<f64>,
    pub pseudo_threshold: Option<f64>,
    pub ablation: Option<String>,
    pub seed: Option<u64>,
    pub summed_single_step: Option<bool>,
    pub deterministic: Option<bool>,
    pub sum_scores: Option<bool>,
    pub backbone: Option<BackboneConfig>,
}

impl PartialExperiment {
    pub fn apply(&self, base: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = &self.scenario {
            base.scenario = s.clone();
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(w) = self.weights {
            base.weights = w;
        }
        if let Some(v) = self.beta_alpha {
            base.beta_alpha = v;
        }
        if let Some(v) = self.mask_prob {
            base.mask_prob = v;
        }
        if let Some(s) = self.scheduler {
            base.scheduler = s;
        }
        if let Some(v) = self.rul_cap {
            base.rul_cap = v;
        }
        if let Some(v) = self.pseudo_threshold {
            base.pseudo_threshold = v;
        }
        if let Some(name) = &self.ablation {
            base.ablation = AblationFlags::from_name(name)?;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        if let Some(v) = self.summed_single_step {
            base.summed_single_step = v;
        }
        if let Some(v) = self.deterministic {
            base.deterministic = v;
        }
        if let Some(v) = self.sum_scores {
            base.sum_scores = v;
        }
        if let Some(b) = &self.backbone {
            base.backbone = Some(b.clone());
        }
        Ok(())
    }
}

/// On-disk config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    pub experiment: PartialExperiment,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `SOURCE->TARGET` scenario notation.
pub fn parse_scenario(s: &str) -> Result<Scenario> {
    let (a, b) = s
        .split_once("->")
        .ok_or_else(|| Error::Config(format!("scenario {s:?} must be written SOURCE->TARGET")))?;
    let (source, target) = (a.trim(), b.trim());
    if source.is_empty() || target.is_empty() {
        return Err(Error::Config(format!("scenario {s:?} has an empty side")));
    }
    Ok(Scenario {
        source: source.to_string(),
        target: target.to_string(),
    })
}

/// Command-line override set shared by `train` and `sweep`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds; multiple values run one sub-run each.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Ablation: none, source_only, no_target, no_mixup, no_ssl.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Dataset family: cmapss, mfd, synthetic.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Transfer case, e.g. FD001->FD003 or a->b.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Deterministic mode (bitwise reproducible runs).
    #[arg(long)]
    pub deterministic: Option<bool>,
    /// Dataset root; falls back to MDAN_DATA_ROOT.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Epoch override for reduced-budget runs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Fully resolved run setup.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticSection,
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
}

fn env_data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Built-in defaults for a dataset/scenario pair.
fn scenario_defaults(dataset: DatasetKind, scenario: &Scenario) -> Result<ExperimentConfig> {
    match dataset {
        DatasetKind::Cmapss => {
            let source: CmapssSubset = scenario.source.parse()?;
            let target: CmapssSubset = scenario.target.parse()?;
            Ok(ExperimentConfig::cmapss_defaults(source, target))
        }
        DatasetKind::Mfd => {
            scenario.source.parse::<MfdCondition>()?;
            scenario.target.parse::<MfdCondition>()?;
            Ok(ExperimentConfig::mfd_defaults(&scenario.source, &scenario.target))
        }
        DatasetKind::Synthetic => Ok(ExperimentConfig {
            scenario: scenario.clone(),
            ..ExperimentConfig::default()
        }),
    }
}

/// One sweep cell: scenario defaults overlaid with the shared partial.
pub fn resolve_cell(
    dataset: DatasetKind,
    scenario: &Scenario,
    partial: &PartialExperiment,
) -> Result<ExperimentConfig> {
    let mut experiment = scenario_defaults(dataset, scenario)?;
    partial.apply(&mut experiment)?;
    experiment.scenario = scenario.clone();
    Ok(experiment)
}

/// Resolve the override chain into one runnable setup.
pub fn resolve(overrides: &Overrides) -> Result<Resolved> {
    let file = match &overrides.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };

    let dataset: DatasetKind = overrides
        .dataset
        .as_deref()
        .or(file.dataset.as_deref())
        .unwrap_or("synthetic")
        .parse()?;

    let scenario = match &overrides.scenario {
        Some(s) => parse_scenario(s)?,
        None => match &file.experiment.scenario {
            Some(s) => s.clone(),
            None if dataset == DatasetKind::Synthetic => Scenario {
                source: "synthetic-source".into(),
                target: "synthetic-target".into(),
            },
            None => {
                return Err(Error::Config(format!(
                    "dataset {dataset} needs a scenario (--scenario SOURCE->TARGET)"
                )))
            }
        },
    };

    let mut experiment = scenario_defaults(dataset, &scenario)?;
    file.experiment.apply(&mut experiment)?;
    experiment.scenario = scenario;
    if let Some(name) = &overrides.ablation {
        experiment.ablation = AblationFlags::from_name(name)?;
    }
    if let Some(d) = overrides.deterministic {
        experiment.deterministic = d;
    }
    if let Some(e) = overrides.epochs {
        experiment.epochs = e;
    }

    let seeds = if overrides.seed.is_empty() {
        vec![experiment.seed]
    } else {
        overrides.seed.clone()
    };
    experiment.seed = seeds[0];
    experiment.validate()?;

    Ok(Resolved {
        dataset,
        data_dir: overrides
            .data_dir
            .clone()
            .or(file.data_dir)
            .or_else(env_data_root),
        synthetic: file.synthetic.unwrap_or_default(),
        experiment,
        seeds,
    })
}

fn require_data_dir(resolved: &Resolved) -> Result<&Path> {
    resolved.data_dir.as_deref().ok_or_else(|| {
        Error::Config(format!(
            "dataset {} needs a data directory (--data-dir or {DATA_ROOT_ENV})",
            resolved.dataset
        ))
    })
}

/// Load the (source, target) domain pair for a resolved run.
pub fn load_pair(resolved: &Resolved) -> Result<(DomainDataset, DomainDataset)> {
    let scenario = &resolved.experiment.scenario;
    match resolved.dataset {
        DatasetKind::Synthetic => {
            let s = &resolved.synthetic;
            Ok(make_synthetic_pair_with(s.seed, &s.shift(), &s.spec()))
        }
        DatasetKind::Cmapss => {
            let dir = require_data_dir(resolved)?;
            let opts = CmapssOptions {
                rul_cap: resolved.experiment.rul_cap,
                ..CmapssOptions::default()
            };
            let source = load_cmapss_with(dir, scenario.source.parse()?, &opts)?;
            let target = load_cmapss_with(dir, scenario.target.parse()?, &opts)?;
            Ok((source, target))
        }
        DatasetKind::Mfd => {
            let dir = require_data_dir(resolved)?;
            let opts = MfdOptions::default();
            let source = load_mfd_with(dir, scenario.source.parse()?, &opts)?;
            let target = load_mfd_with(dir, scenario.target.parse()?, &opts)?;
            Ok((source, target))
        }
    }
}
