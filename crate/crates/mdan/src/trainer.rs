//! The three-stage training loop: a supervised source stage with mixup and
//! masked reconstruction, an intermediate cross-domain mixup stage driven by
//! the progressive ratio scheduler, and a pseudo-labelled target stage.
//! Includes the optimizer, experiment configuration, history logging, and
//! bit-exact checkpoint/resume.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{stack_batch, BackboneConfig, Model};
use crate::data::{CmapssSubset, DomainDataset, Task, WindowedSample};
use crate::error::{Error, Result};
use crate::evaluation::{metric_report, MetricReport};
use crate::mixup::{
    domain_distance_with, mix, sample_beta, scheduler_step, scheduler_step_with_q,
    MixupSchedulerState, SchedulerTraceRow, DEFAULT_PROJECTIONS,
};
use crate::objectives::{
    intermediate_loss, random_permutation, source_total, target_total, LossWeights, MaskSpec,
};
use crate::par::Parallelism;
use crate::rng::{RngState, SeededRng, Stream};
use crate::tape::Tape;

/// Progressive mixup-ratio scheduler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSettings {
    pub temperature: f64,
    pub sigma: f64,
    pub lambda0: f64,
}

impl Default for SchedulerSettings {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            sigma: 0.2,
            lambda0: 0.0,
        }
    }
}

/// Which training stages/terms to disable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Skip the intermediate and target stages entirely.
    pub source_only: bool,
    /// Skip the target stage.
    pub no_target: bool,
    /// Drop every mixup term (alpha1 = alpha3 = alpha5 = 0).
    pub no_mixup: bool,
    /// Drop the reconstruction term (alpha2 = 0).
    pub no_ssl: bool,
}

impl AblationFlags {
    pub fn from_name(name: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        match name {
            "none" | "full" => {}
            "source_only" => f.source_only = true,
            "no_target" => f.no_target = true,
            "no_mixup" => f.no_mixup = true,
            "no_ssl" => f.no_ssl = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (expected none, source_only, no_target, no_mixup, no_ssl)"
                )))
            }
        }
        Ok(f)
    }

    pub fn name(&self) -> &'static str {
        if self.source_only {
            "source_only"
        } else if self.no_target && self.no_mixup {
            "no_target+no_mixup"
        } else if self.no_target {
            "no_target"
        } else if self.no_mixup {
            "no_mixup"
        } else if self.no_ssl {
            "no_ssl"
        } else {
            "none"
        }
    }
}

/// Source/target pair by name.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Scenario {
    pub source: String,
    pub target: String,
}

/// Everything that defines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    /// Beta(alpha, alpha) parameter for in-batch mixup ratios.
    pub beta_alpha: f64,
    /// Per-time-step masking probability for the reconstruction loss.
    pub mask_prob: f64,
    pub scheduler: SchedulerSettings,
    pub rul_cap: f64,
    pub pseudo_threshold: f64,
    pub ablation: AblationFlags,
    pub seed: u64,
    /// One optimizer step on the summed stage losses instead of three
    /// separate stage steps.
    pub summed_single_step: bool,
    /// Deterministic mode keeps every reduction sequential; switching it
    /// off lets the distance estimator use the data-parallel path.
    pub deterministic: bool,
    /// Report scores summed over samples instead of averaged.
    pub sum_scores: bool,
    /// Architecture override; picked from the task when absent.
    pub backbone: Option<BackboneConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::default(),
            epochs: 100,
            batch_size: 256,
            learning_rate: 3e-4,
            weights: LossWeights::default(),
            beta_alpha: 0.2,
            mask_prob: 0.5,
            scheduler: SchedulerSettings::default(),
            rul_cap: 125.0,
            pseudo_threshold: 0.9,
            ablation: AblationFlags::default(),
            seed: 0,
            summed_single_step: false,
            deterministic: true,
            sum_scores: false,
            backbone: None,
        }
    }
}

impl ExperimentConfig {
    /// Published defaults for a turbofan transfer scenario; epochs keyed to
    /// the source subset.
    pub fn cmapss_defaults(source: CmapssSubset, target: CmapssSubset) -> Self {
        let epochs = match source {
            CmapssSubset::FD001 => 100,
            CmapssSubset::FD002 => 75,
            CmapssSubset::FD003 => 150,
            CmapssSubset::FD004 => 175,
        };
        Self {
            scenario: Scenario {
                source: source.to_string(),
                target: target.to_string(),
            },
            epochs,
            ..Self::default()
        }
    }

    /// Published defaults for a bearing fault-diagnosis transfer scenario.
    pub fn mfd_defaults(source: &str, target: &str) -> Self {
        Self {
            scenario: Scenario {
                source: source.to_string(),
                target: target.to_string(),
            },
            epochs: 15,
            batch_size: 512,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    /// Validate, reporting every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Err(e) = self.weights.validate() {
            problems.push(e.to_string());
        }
        if self.beta_alpha <= 0.0 {
            problems.push(format!("beta_alpha must be > 0, got {}", self.beta_alpha));
        }
        if !(0.0 < self.mask_prob && self.mask_prob < 1.0) {
            problems.push(format!("mask_prob must be in (0,1), got {}", self.mask_prob));
        }
        if self.scheduler.temperature <= 0.0 {
            problems.push(format!(
                "scheduler.temperature must be > 0, got {}",
                self.scheduler.temperature
            ));
        }
        if self.scheduler.sigma < 0.0 {
            problems.push(format!("scheduler.sigma must be >= 0, got {}", self.scheduler.sigma));
        }
        if !(0.0..=1.0).contains(&self.scheduler.lambda0) {
            problems.push(format!(
                "scheduler.lambda0 must be in [0,1], got {}",
                self.scheduler.lambda0
            ));
        }
        if self.rul_cap <= 0.0 {
            problems.push(format!("rul_cap must be > 0, got {}", self.rul_cap));
        }
        if !(0.0..=1.0).contains(&self.pseudo_threshold) {
            problems.push(format!(
                "pseudo_threshold must be in [0,1], got {}",
                self.pseudo_threshold
            ));
        }
        if let Some(b) = &self.backbone {
            if let Err(e) = b.validate() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.no_mixup {
            w.alpha1 = 0.0;
            w.alpha3 = 0.0;
            w.alpha5 = 0.0;
        }
        if self.ablation.no_ssl {
            w.alpha2 = 0.0;
        }
        w
    }
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One update over all tensors; errors if any parameter goes non-finite.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i].zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|pv, &mv, &vv| {
                    *pv -= lr * (mv / bc1) / ((vv / bc2).sqrt() + eps);
                });
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    component: format!("optimizer step produced non-finite parameter tensor {i}"),
                    iteration: self.t as usize,
                });
            }
        }
        Ok(())
    }
}

/// Per-iteration metric row; absent stages leave their columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub epoch: usize,
    pub l_s_or: f64,
    pub l_s_mx: Option<f64>,
    pub l_m: Option<f64>,
    pub l_um: Option<f64>,
    pub l_r: Option<f64>,
    pub l_cd: Option<f64>,
    pub l_t_or: Option<f64>,
    pub l_t_mx: Option<f64>,
    /// Beta-drawn in-batch mixup ratio for this iteration.
    pub lambda: f64,
    pub lambda_tilde: Option<f64>,
    pub q: Option<f64>,
    pub d_s_mix: Option<f64>,
    pub d_t_mix: Option<f64>,
    pub kept_fraction: Option<f64>,
}

pub const HISTORY_HEADER: &str = "iteration,epoch,l_s_or,l_s_mx,l_m,l_um,l_r,l_cd,l_t_or,l_t_mx,lambda,lambda_tilde,q,d_s_mix,d_t_mix,kept_fraction";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl HistoryRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.epoch,
            self.l_s_or,
            opt_cell(self.l_s_mx),
            opt_cell(self.l_m),
            opt_cell(self.l_um),
            opt_cell(self.l_r),
            opt_cell(self.l_cd),
            opt_cell(self.l_t_or),
            opt_cell(self.l_t_mx),
            self.lambda,
            opt_cell(self.lambda_tilde),
            opt_cell(self.q),
            opt_cell(self.d_s_mix),
            opt_cell(self.d_t_mix),
            opt_cell(self.kept_fraction),
        )
    }
}

/// Write the full history log as CSV.
pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 96 + 128);
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write the scheduler trace as CSV.
pub fn write_scheduler_trace_csv(path: &Path, rows: &[SchedulerTraceRow]) -> Result<()> {
    let mut out = String::from("n,q,lambda_n,lambda_tilde,d_s_mix,d_t_mix\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n, r.q, r.lambda_n, r.lambda_tilde, r.d_s_mix, r.d_t_mix
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pseudo-labels for a target batch.
pub struct PseudoLabels {
    /// One label per sample (regression value or argmax class).
    pub labels: Array1<f64>,
    /// Indices passing the confidence threshold.
    pub kept: Vec<usize>,
    pub kept_fraction: f64,
}

/// Label a batch with the model's own eval-mode predictions. Classification
/// keeps only samples whose max softmax probability reaches `threshold`.
pub fn pseudo_label(model: &Model, x: &Array3<f64>, threshold: f64) -> Result<PseudoLabels> {
    let pred = model.predict_array(x)?;
    let n = pred.nrows();
    match model.config.task {
        Task::Regression => Ok(PseudoLabels {
            labels: Array1::from_iter(pred.column(0).iter().cloned()),
            kept: (0..n).collect(),
            kept_fraction: 1.0,
        }),
        Task::Classification { .. } => {
            let mut labels = Array1::zeros(n);
            let mut kept = Vec::new();
            for (i, row) in pred.rows().into_iter().enumerate() {
                let max_logit = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&l| (l - max_logit).exp()).sum();
                let (argmax, conf) = row
                    .iter()
                    .enumerate()
                    .map(|(c, &l)| (c, (l - max_logit).exp() / z))
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap();
                labels[i] = argmax as f64;
                if conf >= threshold {
                    kept.push(i);
                }
            }
            let kept_fraction = if n == 0 { 0.0 } else { kept.len() as f64 / n as f64 };
            Ok(PseudoLabels { labels, kept, kept_fraction })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TrainRngStates {
    beta: RngState,
    mask: RngState,
    dropout: RngState,
    scheduler: RngState,
    projections: RngState,
    pairing: RngState,
}

struct TrainRngs {
    beta: SeededRng,
    mask: SeededRng,
    dropout: SeededRng,
    scheduler: SeededRng,
    projections: SeededRng,
    pairing: SeededRng,
}

impl TrainRngs {
    fn new(seed: u64) -> Self {
        Self {
            beta: SeededRng::new(seed, Stream::Beta),
            mask: SeededRng::new(seed, Stream::Mask),
            dropout: SeededRng::new(seed, Stream::Dropout),
            scheduler: SeededRng::new(seed, Stream::Scheduler),
            projections: SeededRng::new(seed, Stream::Projections),
            pairing: SeededRng::new(seed, Stream::Pairing),
        }
    }

    fn states(&self) -> TrainRngStates {
        TrainRngStates {
            beta: self.beta.state(),
            mask: self.mask.state(),
            dropout: self.dropout.state(),
            scheduler: self.scheduler.state(),
            projections: self.projections.state(),
            pairing: self.pairing.state(),
        }
    }

    fn restore(states: &TrainRngStates) -> Self {
        Self {
            beta: SeededRng::restore(&states.beta),
            mask: SeededRng::restore(&states.mask),
            dropout: SeededRng::restore(&states.dropout),
            scheduler: SeededRng::restore(&states.scheduler),
            projections: SeededRng::restore(&states.projections),
            pairing: SeededRng::restore(&states.pairing),
        }
    }
}

/// Full mutable state of a run.
pub struct TrainState {
    pub config: ExperimentConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub scheduler: MixupSchedulerState,
    /// Completed iterations.
    pub iteration: u64,
    pub history: Vec<HistoryRow>,
    pub trace: Vec<SchedulerTraceRow>,
    rngs: TrainRngs,
}

/// Iterations per epoch: the larger domain drives, the smaller cycles.
pub fn iterations_per_epoch(n_source: usize, n_target: usize, batch_size: usize) -> usize {
    n_source.max(n_target).div_ceil(batch_size)
}

/// Deterministic per-epoch sample order for one domain.
fn epoch_order(seed: u64, stream: Stream, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = SeededRng::new(
        seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        stream,
    );
    random_permutation(n, &mut rng)
}

fn take_batch(
    windows: &[WindowedSample],
    order: &[usize],
    step: usize,
    batch_size: usize,
) -> (Array3<f64>, Array1<f64>) {
    let refs: Vec<&WindowedSample> = (0..batch_size.min(order.len().max(batch_size)))
        .take(batch_size)
        .map(|j| &windows[order[(step * batch_size + j) % order.len()]])
        .collect();
    stack_batch(&refs)
}

fn default_backbone(dataset: &DomainDataset) -> Result<BackboneConfig> {
    let (m, k) = dataset
        .shape()
        .ok_or_else(|| Error::Empty(format!("domain {} has no training windows", dataset.name)))?;
    let mut cfg = match dataset.task {
        Task::Regression => BackboneConfig::cmapss_default(),
        Task::Classification { .. } => BackboneConfig::mfd_default(),
    };
    cfg.input_channels = m;
    cfg.window = k;
    if let Task::Classification { num_classes } = dataset.task {
        cfg.num_classes = num_classes;
        if let Some(last) = cfg.predictor_widths.last_mut() {
            *last = num_classes;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_finite(value: f64, component: &str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            component: component.to_string(),
            iteration: iteration as usize,
        })
    }
}

impl TrainState {
    /// Fresh state for a run over the given domain pair.
    pub fn init(source: &DomainDataset, target: &DomainDataset, config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let backbone = match &config.backbone {
            Some(b) => b.clone(),
            None => default_backbone(source)?,
        };
        let (m, k) = source.shape().ok_or_else(|| Error::Empty("empty source domain".into()))?;
        if (backbone.input_channels, backbone.window) != (m, k) {
            return Err(Error::Shape(format!(
                "backbone expects {}x{} windows, source provides {m}x{k}",
                backbone.input_channels, backbone.window
            )));
        }
        if target.shape() != Some((m, k)) {
            return Err(Error::Shape(format!(
                "target window shape {:?} differs from source {:?}",
                target.shape(),
                source.shape()
            )));
        }
        let model = Model::init(backbone, config.seed)?;
        let shapes: Vec<(usize, usize)> =
            model.params.tensors.iter().map(|t| t.dim()).collect();
        let ipe = iterations_per_epoch(source.train.len(), target.train.len(), config.batch_size);
        let horizon = config.epochs * ipe;
        Ok(Self {
            optimizer: Adam::new(config.learning_rate, &shapes),
            scheduler: MixupSchedulerState::new(
                horizon,
                config.scheduler.temperature,
                config.scheduler.sigma,
                config.scheduler.lambda0,
            ),
            iteration: 0,
            history: Vec::new(),
            trace: Vec::new(),
            rngs: TrainRngs::new(config.seed),
            model,
            config: config.clone(),
        })
    }

    /// Total iterations this run is configured for.
    pub fn total_iterations(&self, source: &DomainDataset, target: &DomainDataset) -> u64 {
        let ipe = iterations_per_epoch(
            source.train.len(),
            target.train.len(),
            self.config.batch_size,
        );
        (self.config.epochs * ipe) as u64
    }

    /// Run until `limit` iterations have completed (capped at the configured
    /// total).
    pub fn run_until(
        &mut self,
        source: &DomainDataset,
        target: &DomainDataset,
        limit: u64,
    ) -> Result<()> {
        let ipe = iterations_per_epoch(
            source.train.len(),
            target.train.len(),
            self.config.batch_size,
        ) as u64;
        let total = self.total_iterations(source, target).min(limit);
        let mut cached_epoch = u64::MAX;
        let mut src_order: Vec<usize> = Vec::new();
        let mut tgt_order: Vec<usize> = Vec::new();
        while self.iteration < total {
            let epoch = self.iteration / ipe;
            if epoch != cached_epoch {
                src_order = epoch_order(
                    self.config.seed,
                    Stream::SourceBatches,
                    epoch as usize,
                    source.train.len(),
                );
                tgt_order = epoch_order(
                    self.config.seed,
                    Stream::TargetBatches,
                    epoch as usize,
                    target.train.len(),
                );
                cached_epoch = epoch;
            }
            let step = (self.iteration % ipe) as usize;
            self.one_iteration(source, target, epoch as usize, step, &src_order, &tgt_order)?;
        }
        Ok(())
    }

    /// Run the whole configured schedule.
    pub fn run(&mut self, source: &DomainDataset, target: &DomainDataset) -> Result<()> {
        self.run_until(source, target, u64::MAX)
    }

    #[allow(clippy::too_many_arguments)]
    fn one_iteration(
        &mut self,
        source: &DomainDataset,
        target: &DomainDataset,
        epoch: usize,
        step: usize,
        src_order: &[usize],
        tgt_order: &[usize],
    ) -> Result<()> {
        let it = self.iteration + 1;
        let cfg = &self.config;
        let w = cfg.effective_weights();
        let batch = cfg.batch_size;
        let (xs, ys) = take_batch(&source.train, src_order, step, batch);
        let (xt, _) = take_batch(&target.train, tgt_order, step, batch);

        let lam = sample_beta(cfg.beta_alpha, &mut self.rngs.beta)?;
        let perm_s = random_permutation(xs.dim().0, &mut self.rngs.pairing);
        let mask = MaskSpec::sample(self.model.config.window, cfg.mask_prob, &mut self.rngs.mask)?;

        let adaptation = !cfg.ablation.source_only;
        let run_intermediate = adaptation && !cfg.ablation.no_mixup;
        let run_target = adaptation && !cfg.ablation.no_target;

        let mut row = HistoryRow {
            iteration: it,
            epoch,
            l_s_or: 0.0,
            l_s_mx: None,
            l_m: None,
            l_um: None,
            l_r: None,
            l_cd: None,
            l_t_or: None,
            l_t_mx: None,
            lambda: lam,
            lambda_tilde: None,
            q: None,
            d_s_mix: None,
            d_t_mix: None,
            kept_fraction: None,
        };

        // target-side preparations shared by stages 2 and 3; pseudo-labels
        // and scheduler distances come from the pre-update model
        let prepared = if adaptation {
            let pseudo = pseudo_label(&self.model, &xt, cfg.pseudo_threshold)?;
            let g_s = self.model.embed_array(&xs)?;
            let g_t = self.model.embed_array(&xt)?;
            let n = g_s.nrows().min(g_t.nrows());
            let g_s_n = g_s.slice(ndarray::s![..n, ..]).to_owned();
            let g_t_n = g_t.slice(ndarray::s![..n, ..]).to_owned();
            let g_mix = mix(&g_s_n, &g_t_n, self.scheduler.lambda_prev)?;
            let mode = if cfg.deterministic {
                Parallelism::Sequential
            } else {
                Parallelism::default()
            };
            let d_s = domain_distance_with(
                &g_s, &g_mix, DEFAULT_PROJECTIONS, &mut self.rngs.projections, mode,
            )?;
            let d_t = domain_distance_with(
                &g_t, &g_mix, DEFAULT_PROJECTIONS, &mut self.rngs.projections, mode,
            )?;
            let trace_row = if d_s + d_t > 0.0 {
                scheduler_step(&mut self.scheduler, d_s, d_t, &mut self.rngs.scheduler)?
            } else {
                // degenerate identical embeddings: use the equal-distance
                // limit of the similarity weight
                let q = (-1.0 / (2.0 * self.scheduler.temperature)).exp();
                log::warn!("iteration {it}: zero scheduler distances, using equal-distance q");
                scheduler_step_with_q(&mut self.scheduler, q, d_s, d_t, &mut self.rngs.scheduler)?
            };
            row.q = Some(trace_row.q);
            row.lambda_tilde = Some(trace_row.lambda_tilde);
            row.d_s_mix = Some(d_s);
            row.d_t_mix = Some(d_t);
            row.kept_fraction = Some(pseudo.kept_fraction);
            self.trace.push(trace_row.clone());
            Some((pseudo, trace_row.lambda_tilde))
        } else {
            None
        };
        let lam_t = if run_target {
            Some(sample_beta(cfg.beta_alpha, &mut self.rngs.beta)?)
        } else {
            None
        };

        if cfg.summed_single_step {
            self.summed_step(
                &xs, &ys, &xt, lam, lam_t, &perm_s, &mask, &w, &prepared, run_intermediate,
                run_target, &mut row, it,
            )?;
        } else {
            self.staged_steps(
                &xs, &ys, &xt, lam, lam_t, &perm_s, &mask, &w, &prepared, run_intermediate,
                run_target, &mut row, it,
            )?;
        }

        self.history.push(row);
        self.iteration = it;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn staged_steps(
        &mut self,
        xs: &Array3<f64>,
        ys: &Array1<f64>,
        xt: &Array3<f64>,
        lam: f64,
        lam_t: Option<f64>,
        perm_s: &[usize],
        mask: &MaskSpec,
        w: &LossWeights,
        prepared: &Option<(PseudoLabels, f64)>,
        run_intermediate: bool,
        run_target: bool,
        row: &mut HistoryRow,
        it: u64,
    ) -> Result<()> {
        // stage 1: source
        {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let s = source_total(
                &self.model, &mut tape, &bound, xs, ys, lam, perm_s, mask, w, true,
                Some(&mut self.rngs.dropout),
            )?;
            row.l_s_or = check_finite(tape.scalar(s.l_or), "source supervised loss", it)?;
            row.l_s_mx = s
                .l_mx
                .map(|n| check_finite(tape.scalar(n), "source mixup loss", it))
                .transpose()?;
            if let Some(r) = &s.recon {
                row.l_m = Some(check_finite(tape.scalar(r.l_m), "masked reconstruction loss", it)?);
                row.l_um = Some(check_finite(tape.scalar(r.l_um), "unmasked reconstruction loss", it)?);
                row.l_r = Some(check_finite(tape.scalar(r.l_r), "reconstruction loss", it)?);
            }
            let grads = tape.backward(s.total)?;
            let g: Vec<Array2<f64>> = bound
                .ids
                .iter()
                .zip(&self.model.params.tensors)
                .map(|(&id, t)| grads.get(id, t.dim()))
                .collect();
            self.optimizer.step(&mut self.model.params.tensors, &g)?;
        }

        let Some((pseudo, lam_tilde)) = prepared else {
            return Ok(());
        };

        // stage 2: intermediate mixup domain
        if run_intermediate {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let l_cd = intermediate_loss(
                &self.model, &mut tape, &bound, xs, ys, xt, &pseudo.labels, *lam_tilde, true,
                Some(&mut self.rngs.dropout),
            )?;
            row.l_cd = Some(check_finite(tape.scalar(l_cd), "intermediate mixup loss", it)?);
            let total = tape.scale(l_cd, w.alpha3);
            let grads = tape.backward(total)?;
            let g: Vec<Array2<f64>> = bound
                .ids
                .iter()
                .zip(&self.model.params.tensors)
                .map(|(&id, t)| grads.get(id, t.dim()))
                .collect();
            self.optimizer.step(&mut self.model.params.tensors, &g)?;
        }

        // stage 3: target self-training
        if run_target {
            if pseudo.kept.is_empty() {
                log::warn!("iteration {it}: every pseudo-label below threshold, skipping target stage");
                return Ok(());
            }
            let x_kept = gather_samples(xt, &pseudo.kept);
            let y_kept = Array1::from_iter(pseudo.kept.iter().map(|&i| pseudo.labels[i]));
            let perm_t = random_permutation(x_kept.dim().0, &mut self.rngs.pairing);
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape);
            let t = target_total(
                &self.model, &mut tape, &bound, &x_kept, &y_kept,
                lam_t.expect("target stage draws its mixup ratio"), &perm_t, w, true,
                Some(&mut self.rngs.dropout),
            )?;
            row.l_t_or = Some(check_finite(tape.scalar(t.l_or), "target supervised loss", it)?);
            row.l_t_mx = t
                .l_mx
                .map(|n| check_finite(tape.scalar(n), "target mixup loss", it))
                .transpose()?;
            let grads = tape.backward(t.total)?;
            let g: Vec<Array2<f64>> = bound
                .ids
                .iter()
                .zip(&self.model.params.tensors)
                .map(|(&id, t)| grads.get(id, t.dim()))
                .collect();
            self.optimizer.step(&mut self.model.params.tensors, &g)?;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn summed_step(
        &mut self,
        xs: &Array3<f64>,
        ys: &Array1<f64>,
        xt: &Array3<f64>,
        lam: f64,
        lam_t: Option<f64>,
        perm_s: &[usize],
        mask: &MaskSpec,
        w: &LossWeights,
        prepared: &Option<(PseudoLabels, f64)>,
        run_intermediate: bool,
        run_target: bool,
        row: &mut HistoryRow,
        it: u64,
    ) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let s = source_total(
            &self.model, &mut tape, &bound, xs, ys, lam, perm_s, mask, w, true,
            Some(&mut self.rngs.dropout),
        )?;
        row.l_s_or = check_finite(tape.scalar(s.l_or), "source supervised loss", it)?;
        row.l_s_mx = s
            .l_mx
            .map(|n| check_finite(tape.scalar(n), "source mixup loss", it))
            .transpose()?;
        if let Some(r) = &s.recon {
            row.l_m = Some(check_finite(tape.scalar(r.l_m), "masked reconstruction loss", it)?);
            row.l_um = Some(check_finite(tape.scalar(r.l_um), "unmasked reconstruction loss", it)?);
            row.l_r = Some(check_finite(tape.scalar(r.l_r), "reconstruction loss", it)?);
        }
        let mut total = s.total;

        if let Some((pseudo, lam_tilde)) = prepared {
            if run_intermediate {
                let l_cd = intermediate_loss(
                    &self.model, &mut tape, &bound, xs, ys, xt, &pseudo.labels, *lam_tilde, true,
                    Some(&mut self.rngs.dropout),
                )?;
                row.l_cd = Some(check_finite(tape.scalar(l_cd), "intermediate mixup loss", it)?);
                let scaled = tape.scale(l_cd, w.alpha3);
                total = tape.add(total, scaled);
            }
            if run_target && !pseudo.kept.is_empty() {
                let x_kept = gather_samples(xt, &pseudo.kept);
                let y_kept = Array1::from_iter(pseudo.kept.iter().map(|&i| pseudo.labels[i]));
                let perm_t = random_permutation(x_kept.dim().0, &mut self.rngs.pairing);
                let t = target_total(
                    &self.model, &mut tape, &bound, &x_kept, &y_kept,
                    lam_t.expect("target stage draws its mixup ratio"), &perm_t, w, true,
                    Some(&mut self.rngs.dropout),
                )?;
                row.l_t_or = Some(check_finite(tape.scalar(t.l_or), "target supervised loss", it)?);
                row.l_t_mx = t
                    .l_mx
                    .map(|n| check_finite(tape.scalar(n), "target mixup loss", it))
                    .transpose()?;
                total = tape.add(total, t.total);
            } else if run_target {
                log::warn!("iteration {it}: every pseudo-label below threshold, skipping target term");
            }
        }
        let grads = tape.backward(total)?;
        let g: Vec<Array2<f64>> = bound
            .ids
            .iter()
            .zip(&self.model.params.tensors)
            .map(|(&id, t)| grads.get(id, t.dim()))
            .collect();
        self.optimizer.step(&mut self.model.params.tensors, &g)
    }
}

fn gather_samples(x: &Array3<f64>, idx: &[usize]) -> Array3<f64> {
    let (_, m, k) = x.dim();
    Array3::from_shape_fn((idx.len(), m, k), |(i, c, t)| x[(idx[i], c, t)])
}

/// Train from scratch over a domain pair.
pub fn train_mdan(
    source: &DomainDataset,
    target: &DomainDataset,
    config: &ExperimentConfig,
) -> Result<TrainState> {
    let mut state = TrainState::init(source, target, config)?;
    state.run(source, target)?;
    Ok(state)
}

/// Eval-mode predictions over a window list, batched for memory.
pub fn predict_windows(model: &Model, windows: &[WindowedSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(512) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs);
        let pred = model.predict_array(&x)?;
        match model.config.task {
            Task::Regression => out.extend(pred.column(0).iter().cloned()),
            Task::Classification { .. } => {
                for prow in pred.rows() {
                    let argmax = prow
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(c, _)| c as f64)
                        .unwrap_or(0.0);
                    out.push(argmax);
                }
            }
        }
    }
    Ok(out)
}

/// Eval-mode pooled embeddings over (at most `limit`) windows.
pub fn embed_windows(model: &Model, windows: &[WindowedSample], limit: usize) -> Result<Array2<f64>> {
    let take = windows.len().min(limit);
    let mut rows: Vec<Array2<f64>> = Vec::new();
    for chunk in windows[..take].chunks(512) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs);
        rows.push(model.embed_array(&x)?);
    }
    let dim = model.config.feature_dim();
    let mut out = Array2::zeros((take, dim));
    let mut r = 0;
    for block in rows {
        for row in block.rows() {
            out.row_mut(r).assign(&row);
            r += 1;
        }
    }
    Ok(out)
}

/// Metric report for a model over a dataset's test split.
pub fn evaluate(model: &Model, dataset: &DomainDataset, sum_scores: bool) -> Result<MetricReport> {
    if dataset.test.is_empty() {
        return Err(Error::Empty(format!("domain {} has no test windows", dataset.name)));
    }
    let y: Vec<f64> = dataset.test.iter().map(|w| w.y).collect();
    let y_hat = predict_windows(model, &dataset.test)?;
    let classification = matches!(dataset.task, Task::Classification { .. });
    metric_report(&y, &y_hat, classification, sum_scores)
}

// --- checkpointing -------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"MDANCKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ExperimentConfig,
    backbone: BackboneConfig,
    scheduler: MixupSchedulerState,
    iteration: u64,
    history: Vec<HistoryRow>,
    trace: Vec<SchedulerTraceRow>,
    rngs: TrainRngStates,
    param_names: Vec<String>,
    param_shapes: Vec<(usize, usize)>,
    optimizer_t: u64,
}

fn push_tensors(buf: &mut Vec<u8>, tensors: &[Array2<f64>]) {
    for t in tensors {
        for &v in t.iter() {
            buf.write_f64::<LittleEndian>(v).expect("vec write");
        }
    }
}

fn read_tensors(cur: &mut std::io::Cursor<&[u8]>, shapes: &[(usize, usize)], path: &Path) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(shapes.len());
    for &(r, c) in shapes {
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            data.push(cur.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?);
        }
        out.push(Array2::from_shape_vec((r, c), data).expect("tensor shape"));
    }
    Ok(out)
}

/// Write the complete training state; the archive is integrity-checked and
/// resuming from it reproduces subsequent training bit for bit.
pub fn checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: state.config.clone(),
        backbone: state.model.config.clone(),
        scheduler: state.scheduler.clone(),
        iteration: state.iteration,
        history: state.history.clone(),
        trace: state.trace.clone(),
        rngs: state.rngs.states(),
        param_names: state.model.params.names.clone(),
        param_shapes: state.model.params.tensors.iter().map(|t| t.dim()).collect(),
        optimizer_t: state.optimizer.t,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("serializing metadata: {e}")))?;
    let mut payload = Vec::new();
    payload
        .write_u64::<LittleEndian>(meta_json.len() as u64)
        .expect("vec write");
    payload.extend_from_slice(&meta_json);
    push_tensors(&mut payload, &state.model.params.tensors);
    push_tensors(&mut payload, &state.optimizer.m);
    push_tensors(&mut payload, &state.optimizer.v);

    let digest = Sha256::digest(&payload);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_u64::<LittleEndian>(payload.len() as u64)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&digest).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint written by [`checkpoint`].
pub fn resume(path: &Path) -> Result<TrainState> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let len = file.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut digest = [0u8; 32];
    file.read_exact(&mut digest).map_err(|e| Error::io(path, e))?;
    let mut payload = vec![0u8; len];
    file.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
    if Sha256::digest(&payload).as_slice() != digest {
        return Err(Error::Checkpoint(format!(
            "{}: integrity check failed (corrupt archive)",
            path.display()
        )));
    }

    let mut cur = std::io::Cursor::new(payload.as_slice());
    let meta_len = cur.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let meta_start = cur.position() as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&payload[meta_start..meta_start + meta_len])
        .map_err(|e| Error::Checkpoint(format!("{}: corrupt metadata: {e}", path.display())))?;
    cur.set_position((meta_start + meta_len) as u64);

    let tensors = read_tensors(&mut cur, &meta.param_shapes, path)?;
    let m = read_tensors(&mut cur, &meta.param_shapes, path)?;
    let v = read_tensors(&mut cur, &meta.param_shapes, path)?;

    let model = Model {
        config: meta.backbone,
        params: crate::backbone::BackboneParams {
            names: meta.param_names,
            tensors,
        },
    };
    let mut optimizer = Adam::new(meta.config.learning_rate, &meta.param_shapes);
    optimizer.t = meta.optimizer_t;
    optimizer.m = m;
    optimizer.v = v;
    Ok(TrainState {
        config: meta.config,
        model,
        optimizer,
        scheduler: meta.scheduler,
        iteration: meta.iteration,
        history: meta.history,
        trace: meta.trace,
        rngs: TrainRngs::restore(&meta.rngs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderKind;
    use crate::data::{make_synthetic_pair_with, ShiftSpec, SyntheticSpec};

    fn desk_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_units: 8,
            min_len: 30,
            max_len: 40,
            channels: 3,
            window: 12,
            step: 4,
            rul_cap: 25.0,
            ..SyntheticSpec::default()
        }
    }

    fn desk_backbone() -> BackboneConfig {
        BackboneConfig {
            encoder_kind: EncoderKind::BidirectionalRecurrent,
            num_layers: 1,
            hidden_units: 6,
            predictor_widths: vec![8, 1],
            dropout_rate: 0.0,
            task: Task::Regression,
            num_classes: 1,
            input_channels: 3,
            window: 12,
            conv_layers: Vec::new(),
        }
    }

    fn desk_config(epochs: usize, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            epochs,
            batch_size: 16,
            learning_rate: 3e-3,
            rul_cap: 25.0,
            seed,
            backbone: Some(desk_backbone()),
            ..ExperimentConfig::default()
        }
    }

    fn desk_pair(seed: u64) -> (DomainDataset, DomainDataset) {
        let shift = ShiftSpec { scale: 2.0, offset: 1.0, noise_std: 0.08 };
        make_synthetic_pair_with(seed, &shift, &desk_spec())
    }

    #[test]
    fn config_validation_lists_all_problems() {
        let cfg = ExperimentConfig {
            epochs: 0,
            batch_size: 0,
            learning_rate: -1.0,
            ..ExperimentConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("epochs"));
        assert!(err.contains("batch_size"));
        assert!(err.contains("learning_rate"));
    }

    #[test]
    fn table_defaults() {
        let c = ExperimentConfig::cmapss_defaults(CmapssSubset::FD001, CmapssSubset::FD002);
        assert_eq!((c.epochs, c.batch_size), (100, 256));
        assert_eq!(c.learning_rate, 3e-4);
        assert_eq!(c.weights.alpha1, 0.5);
        assert_eq!(c.rul_cap, 125.0);
        assert_eq!(
            ExperimentConfig::cmapss_defaults(CmapssSubset::FD003, CmapssSubset::FD001).epochs,
            150
        );
        let m = ExperimentConfig::mfd_defaults("a", "b");
        assert_eq!((m.epochs, m.batch_size), (15, 512));
        assert_eq!(m.learning_rate, 1e-4);
        assert_eq!(m.pseudo_threshold, 0.9);
    }

    #[test]
    fn iteration_count_rules() {
        assert_eq!(iterations_per_epoch(48558, 17731, 256), 190);
        assert_eq!(iterations_per_epoch(10, 10, 256), 1);
        assert_eq!(iterations_per_epoch(256, 512, 256), 2);
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut p = vec![Array2::from_elem((1, 1), 5.0)];
        let mut opt = Adam::new(0.1, &[(1, 1)]);
        for _ in 0..200 {
            let g = vec![p[0].mapv(|v| 2.0 * v)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p[0][(0, 0)].abs() < 0.5);
    }

    #[test]
    fn adam_flags_divergence() {
        let mut p = vec![Array2::from_elem((1, 1), 1.0)];
        let mut opt = Adam::new(0.1, &[(1, 1)]);
        let g = vec![Array2::from_elem((1, 1), f64::NAN)];
        match opt.step(&mut p, &g) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn pseudo_label_regression_keeps_all() {
        let model = Model::init(desk_backbone(), 3).unwrap();
        let mut rng = SeededRng::new(1, Stream::Synthetic);
        let x = Array3::from_shape_fn((5, 3, 12), |_| rand::Rng::random::<f64>(&mut rng));
        let p = pseudo_label(&model, &x, 0.9).unwrap();
        assert_eq!(p.kept.len(), 5);
        assert_eq!(p.kept_fraction, 1.0);
        let pred = model.predict_array(&x).unwrap();
        for i in 0..5 {
            assert_eq!(p.labels[i], pred[(i, 0)]);
        }
    }

    #[test]
    fn pseudo_label_classification_thresholds() {
        let cfg = BackboneConfig {
            task: Task::Classification { num_classes: 3 },
            num_classes: 3,
            predictor_widths: vec![8, 3],
            ..desk_backbone()
        };
        let model = Model::init(cfg, 3).unwrap();
        let mut rng = SeededRng::new(2, Stream::Synthetic);
        let x = Array3::from_shape_fn((20, 3, 12), |_| rand::Rng::random::<f64>(&mut rng));
        let all = pseudo_label(&model, &x, 0.0).unwrap();
        assert_eq!(all.kept.len(), 20);
        let none = pseudo_label(&model, &x, 1.0).unwrap();
        assert!(none.kept.len() < 20); // fresh model is not fully confident
        for &l in all.labels.iter() {
            assert!(l == 0.0 || l == 1.0 || l == 2.0);
        }
    }

    #[test]
    fn training_runs_and_history_has_expected_shape() {
        let (src, tgt) = desk_pair(5);
        let cfg = desk_config(2, 7);
        let state = train_mdan(&src, &tgt, &cfg).unwrap();
        let ipe = iterations_per_epoch(src.train.len(), tgt.train.len(), 16);
        assert_eq!(state.history.len(), 2 * ipe);
        assert_eq!(state.iteration, (2 * ipe) as u64);
        assert_eq!(state.trace.len(), 2 * ipe);
        // all stages present by default
        let last = state.history.last().unwrap();
        assert!(last.l_cd.is_some() && last.l_t_or.is_some() && last.l_s_mx.is_some());
        assert!(last.l_r.is_some());
        // scheduler n never exceeds horizon + 1 (n is the next step index)
        assert!(state.scheduler.n <= state.scheduler.horizon + 1);
        assert!(state.model.params.all_finite());
    }

    #[test]
    fn source_only_matches_plain_supervised_run() {
        let (src, tgt) = desk_pair(11);
        let mut cfg = desk_config(1, 13);
        cfg.ablation.source_only = true;
        let a = train_mdan(&src, &tgt, &cfg).unwrap();
        // history rows carry no adaptation columns
        for row in &a.history {
            assert!(row.l_cd.is_none() && row.l_t_or.is_none() && row.q.is_none());
        }
        // identical seed, identical run
        let b = train_mdan(&src, &tgt, &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn same_seed_is_bitwise_deterministic() {
        let (src, tgt) = desk_pair(17);
        let cfg = desk_config(1, 19);
        let a = train_mdan(&src, &tgt, &cfg).unwrap();
        let b = train_mdan(&src, &tgt, &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history, b.history);
        let c = train_mdan(&src, &tgt, &desk_config(1, 23)).unwrap();
        assert_ne!(a.model.params, c.model.params);
    }

    #[test]
    fn summed_single_step_mode_runs() {
        let (src, tgt) = desk_pair(29);
        let mut cfg = desk_config(1, 31);
        cfg.summed_single_step = true;
        let state = train_mdan(&src, &tgt, &cfg).unwrap();
        let last = state.history.last().unwrap();
        assert!(last.l_cd.is_some() && last.l_t_or.is_some());
        // one optimizer step per iteration instead of three
        assert_eq!(state.optimizer.t, state.iteration);
    }

    #[test]
    fn staged_mode_steps_three_times_per_iteration() {
        let (src, tgt) = desk_pair(37);
        let cfg = desk_config(1, 41);
        let state = train_mdan(&src, &tgt, &cfg).unwrap();
        assert_eq!(state.optimizer.t, 3 * state.iteration);
    }

    #[test]
    fn checkpoint_resume_is_bitwise_exact() {
        let (src, tgt) = desk_pair(43);
        let cfg = desk_config(2, 47);
        let total = TrainState::init(&src, &tgt, &cfg).unwrap().total_iterations(&src, &tgt);
        let half = total / 2;

        // uninterrupted run
        let mut full = TrainState::init(&src, &tgt, &cfg).unwrap();
        full.run(&src, &tgt).unwrap();

        // interrupted at the midpoint, saved, resumed
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = TrainState::init(&src, &tgt, &cfg).unwrap();
        first.run_until(&src, &tgt, half).unwrap();
        checkpoint(&first, &path).unwrap();
        let mut resumed = resume(&path).unwrap();
        assert_eq!(resumed.iteration, half);
        assert_eq!(resumed.model.params, first.model.params);
        resumed.run(&src, &tgt).unwrap();

        assert_eq!(full.model.params, resumed.model.params);
        assert_eq!(full.history, resumed.history);
        assert_eq!(full.optimizer.t, resumed.optimizer.t);
    }

    #[test]
    fn corrupt_checkpoint_is_fatal() {
        let (src, tgt) = desk_pair(53);
        let cfg = desk_config(1, 59);
        let mut state = TrainState::init(&src, &tgt, &cfg).unwrap();
        state.run_until(&src, &tgt, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        checkpoint(&state, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match resume(&path).err().expect("corrupt archive must fail") {
            Error::Checkpoint(msg) => assert!(msg.contains("integrity")),
            e => panic!("expected integrity failure, got {e}"),
        }
        assert!(resume(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn evaluate_produces_metrics() {
        let (src, tgt) = desk_pair(61);
        let cfg = desk_config(1, 67);
        let state = train_mdan(&src, &tgt, &cfg).unwrap();
        let report = evaluate(&state.model, &tgt, false).unwrap();
        assert!(report.rmse.is_finite() && report.rmse >= 0.0);
        assert!(report.accuracy.is_none());
        assert_eq!(report.n, tgt.test.len());
    }

    #[test]
    fn history_csv_roundtrip_shape() {
        let (src, tgt) = desk_pair(71);
        let cfg = desk_config(1, 73);
        let state = train_mdan(&src, &tgt, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&path, &state.history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), HISTORY_HEADER);
        assert_eq!(lines.count(), state.history.len());

        let trace_path = dir.path().join("trace.csv");
        write_scheduler_trace_csv(&trace_path, &state.trace).unwrap();
        let text = std::fs::read_to_string(&trace_path).unwrap();
        assert_eq!(text.lines().count(), state.trace.len() + 1);
    }

    #[test]
    fn embed_windows_caps_at_limit() {
        let (src, _) = desk_pair(79);
        let model = Model::init(desk_backbone(), 3).unwrap();
        let emb = embed_windows(&model, &src.train, 10).unwrap();
        assert_eq!(emb.dim(), (10, 12));
    }

    #[test]
    fn mismatched_domain_shapes_rejected() {
        let (src, _) = desk_pair(83);
        let spec = SyntheticSpec { window: 10, ..desk_spec() };
        let (_, tgt) = make_synthetic_pair_with(1, &ShiftSpec::identity(), &spec);
        let cfg = desk_config(1, 89);
        assert!(TrainState::init(&src, &tgt, &cfg).is_err());
    }
}
