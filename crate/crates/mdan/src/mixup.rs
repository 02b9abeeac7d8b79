//! Mixup mathematics: Beta-distributed ratio sampling, convex combinations
//! of samples/features and their labels, a sliced 1-D Wasserstein estimator
//! between embedding batches, and the progressive mixup-ratio scheduler that
//! the estimator drives.

use ndarray::{Array, Array1, Array2, Dimension};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::rng::SeededRng;

/// Default number of random projections for the sliced Wasserstein estimate.
pub const DEFAULT_PROJECTIONS: usize = 32;

/// One draw from Beta(alpha, alpha).
pub fn sample_beta(alpha: f64, rng: &mut SeededRng) -> Result<f64> {
    let dist = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(format!("invalid beta parameter {alpha}: {e}")))?;
    Ok(dist.sample(&mut **rng))
}

/// A mixed batch: convex combination of two batches and of their labels with
/// the same ratio.
#[derive(Debug, Clone)]
pub struct MixedBatch<D: Dimension> {
    pub x_or_g: Array<f64, D>,
    pub y: Array1<f64>,
    pub lam: f64,
}

/// `lam * a + (1 - lam) * b` for arrays of any rank.
pub fn mix<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>, lam: f64) -> Result<Array<f64, D>> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::Shape(format!(
            "mix: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a * lam + b * (1.0 - lam))
}

/// Mix a pair of batches (raw inputs or features alike) and their labels.
pub fn mixup_pair<D: Dimension>(
    a_i: &Array<f64, D>,
    a_j: &Array<f64, D>,
    y_i: &Array1<f64>,
    y_j: &Array1<f64>,
    lam: f64,
) -> Result<MixedBatch<D>> {
    debug_assert!((0.0..=1.0).contains(&lam));
    Ok(MixedBatch {
        x_or_g: mix(a_i, a_j, lam)?,
        y: mix(y_i, y_j, lam)?,
        lam,
    })
}

/// Sliced 1-D Wasserstein distance between two embedding batches
/// (rows = samples). Each of `projections` random unit directions projects
/// both batches to 1-D, where W1 is the mean absolute difference of matched
/// quantiles of the sorted projections.
pub fn domain_distance(emb_a: &Array2<f64>, emb_b: &Array2<f64>, rng: &mut SeededRng) -> Result<f64> {
    domain_distance_with(emb_a, emb_b, DEFAULT_PROJECTIONS, rng, Parallelism::default())
}

pub fn domain_distance_with(
    emb_a: &Array2<f64>,
    emb_b: &Array2<f64>,
    projections: usize,
    rng: &mut SeededRng,
    mode: Parallelism,
) -> Result<f64> {
    if emb_a.nrows() == 0 || emb_b.nrows() == 0 {
        return Err(Error::Empty("domain_distance: empty batch".into()));
    }
    let d = emb_a.ncols();
    if emb_b.ncols() != d {
        return Err(Error::Shape(format!(
            "domain_distance: feature dims {} vs {}",
            d,
            emb_b.ncols()
        )));
    }
    // Draw all directions up front so the parallel loop stays deterministic.
    let dirs: Vec<Array1<f64>> = (0..projections)
        .map(|_| {
            let mut v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                v /= norm;
            } else {
                v[0] = 1.0;
            }
            v
        })
        .collect();
    let per_dir = map_indexed(mode, projections, |p| {
        let pa = emb_a.dot(&dirs[p]);
        let pb = emb_b.dot(&dirs[p]);
        w1_sorted(pa.to_vec(), pb.to_vec())
    });
    Ok(per_dir.iter().sum::<f64>() / projections as f64)
}

/// Exact 1-D W1 via sorted quantile matching; handles unequal sample counts
/// by evaluating both empirical quantile functions on a common grid.
fn w1_sorted(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let l = a.len().max(b.len());
    let quantile = |v: &[f64], k: usize| {
        let idx = ((k as f64 + 0.5) * v.len() as f64 / l as f64) as usize;
        v[idx.min(v.len() - 1)]
    };
    (0..l)
        .map(|k| (quantile(&a, k) - quantile(&b, k)).abs())
        .sum::<f64>()
        / l as f64
}

/// Progressive mixup-ratio state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupSchedulerState {
    /// λ of the previous step.
    pub lambda_prev: f64,
    /// Current iteration, 1-based.
    pub n: usize,
    /// Scheduler horizon (total iterations).
    pub horizon: usize,
    /// Temperature of the similarity weight.
    pub temperature: f64,
    /// Half-width of the uniform perturbation around λ_n.
    pub sigma: f64,
}

impl MixupSchedulerState {
    pub fn new(horizon: usize, temperature: f64, sigma: f64, lambda0: f64) -> Self {
        Self {
            lambda_prev: lambda0,
            n: 1,
            horizon,
            temperature,
            sigma,
        }
    }

    /// Defaults: T = 0.05, sigma = 0.2, λ_0 = 0.
    pub fn with_horizon(horizon: usize) -> Self {
        Self::new(horizon, 0.05, 0.2, 0.0)
    }
}

/// One scheduler step record, streamed to the diagnostics CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerTraceRow {
    pub n: usize,
    pub q: f64,
    pub lambda_n: f64,
    pub lambda_tilde: f64,
    pub d_s_mix: f64,
    pub d_t_mix: f64,
}

/// Advance the scheduler: similarity weight
/// `q = exp(-d_s / ((d_s + d_t) * T))`, moving average
/// `λ_n = n(1-q)/N + q λ_{n-1}`, and a clamped uniform perturbation
/// `λ̃ ~ U[λ_n - σ, λ_n + σ]`.
pub fn scheduler_step(
    state: &mut MixupSchedulerState,
    d_s_mix: f64,
    d_t_mix: f64,
    rng: &mut SeededRng,
) -> Result<SchedulerTraceRow> {
    if state.n > state.horizon {
        return Err(Error::SchedulerExhausted {
            n: state.n,
            horizon: state.horizon,
        });
    }
    if d_s_mix < 0.0 || d_t_mix < 0.0 || d_s_mix + d_t_mix == 0.0 {
        return Err(Error::Config(format!(
            "scheduler distances must be non-negative and not both zero (got {d_s_mix}, {d_t_mix})"
        )));
    }
    let q = (-d_s_mix / ((d_s_mix + d_t_mix) * state.temperature)).exp();
    scheduler_step_with_q(state, q, d_s_mix, d_t_mix, rng)
}

/// Scheduler update with the similarity weight supplied directly; the
/// degenerate endpoints q = 0 (pure linear ramp, λ_n = n/N) and q = 1
/// (frozen λ) are exact here.
pub fn scheduler_step_with_q(
    state: &mut MixupSchedulerState,
    q: f64,
    d_s_mix: f64,
    d_t_mix: f64,
    rng: &mut SeededRng,
) -> Result<SchedulerTraceRow> {
    if state.n > state.horizon {
        return Err(Error::SchedulerExhausted {
            n: state.n,
            horizon: state.horizon,
        });
    }
    let lambda_n = state.n as f64 * (1.0 - q) / state.horizon as f64 + q * state.lambda_prev;
    let lambda_tilde = rng
        .random_range(lambda_n - state.sigma..=lambda_n + state.sigma)
        .clamp(0.0, 1.0);
    let row = SchedulerTraceRow {
        n: state.n,
        q,
        lambda_n,
        lambda_tilde,
        d_s_mix,
        d_t_mix,
    };
    state.lambda_prev = lambda_n;
    state.n += 1;
    Ok(row)
}
