//! Mixup-based unsupervised domain adaptation for multivariate time series.
//!
//! The crate implements a three-stage training scheme for transferring a
//! remaining-useful-life regressor (or fault classifier) from a labelled
//! source domain to an unlabelled target domain:
//!
//! 1. **Source stage** — supervised loss on labelled source windows, a
//!    feature-level (manifold) mixup loss, and a self-supervised controlled
//!    reconstruction loss on time-step-masked inputs.
//! 2. **Intermediate stage** — an auxiliary mixup domain built from convex
//!    combinations of source and target samples (at both the input and the
//!    feature level), with the mixing ratio driven by a progressive scheduler
//!    that tracks sliced Wasserstein distances between domain embeddings.
//! 3. **Target stage** — pseudo-label self-training on the target domain with
//!    a manifold-mixup consistency term.
//!
//! Modules map onto the pipeline: [`data`] (ingestion, windowing,
//! normalization), [`backbone`] (biLSTM / 1-D CNN encoder, predictor and
//! reconstruction decoder), [`tape`] (reverse-mode autodiff the backbone is
//! built on), [`mixup`] (ratio sampling, scheduler, domain distance),
//! [`objectives`] (all stage losses), [`trainer`] (the per-iteration loop,
//! optimizer and checkpoints), and [`evaluation`] (metrics, KL probe,
//! embedding export).

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod mixup;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
