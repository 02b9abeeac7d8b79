//! Stage losses: supervised source training with manifold mixup and masked
//! reconstruction, the intermediate cross-domain mixup loss, and target
//! self-training with mixup consistency.
//!
//! Every function records onto a caller-provided [`Tape`] with parameters
//! already bound, so a stage total can be backpropagated in one sweep and
//! terms share encoder passes where the math allows.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{pack_position_major, Bound, Model};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::mixup::mix;
use crate::rng::SeededRng;
use crate::tape::{NodeId, Tape};

/// Trade-off weights for the three stage objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    /// Masked-vs-unmasked reconstruction trade-off.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.5,
            alpha3: 1.0,
            alpha4: 1.0,
            alpha5: 1.0,
            gamma: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
            ("alpha5", self.alpha5),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Per-time-step binary mask; `mask[t] = true` zeroes all channels at step t.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub mask_prob: f64,
    pub mask: Vec<bool>,
}

impl MaskSpec {
    /// Sample one mask over `window` steps.
    pub fn sample(window: usize, mask_prob: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(0.0 < mask_prob && mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob must be in (0,1), got {mask_prob}"
            )));
        }
        let mask = (0..window).map(|_| rng.random::<f64>() < mask_prob).collect();
        Ok(Self { mask_prob, mask })
    }

    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self { mask_prob: 0.5, mask }
    }
}

/// Seeded random pairing permutation for in-batch mixup.
pub fn random_permutation(n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut **rng);
    perm
}

/// Labels as a dense target matrix: a column for regression, soft class
/// probabilities for classification (hard labels become one-hot rows).
pub fn labels_to_targets(y: &Array1<f64>, task: Task) -> Result<Array2<f64>> {
    match task {
        Task::Regression => Ok(y.view().insert_axis(ndarray::Axis(1)).to_owned()),
        Task::Classification { num_classes } => {
            let mut t = Array2::zeros((y.len(), num_classes));
            for (i, &label) in y.iter().enumerate() {
                let c = label as usize;
                if label.fract() != 0.0 || c >= num_classes {
                    return Err(Error::Shape(format!(
                        "class label {label} outside 0..{num_classes}"
                    )));
                }
                t[(i, c)] = 1.0;
            }
            Ok(t)
        }
    }
}

/// Batch loss between predictions and dense targets: MSE for regression,
/// soft-target cross-entropy for classification. Mean over the batch.
pub fn base_loss(tape: &mut Tape, pred: NodeId, targets: &Array2<f64>, task: Task) -> Result<NodeId> {
    let (n, d) = tape.value(pred).dim();
    if n == 0 {
        return Err(Error::Empty("base_loss on an empty batch".into()));
    }
    if targets.dim() != (n, d) {
        return Err(Error::Shape(format!(
            "base_loss: predictions {n}x{d} vs targets {}x{}",
            targets.nrows(),
            targets.ncols()
        )));
    }
    match task {
        Task::Regression => {
            let diff = tape.sub_const(pred, targets.clone());
            let sq = tape.sqr(diff);
            Ok(tape.mean_all(sq))
        }
        Task::Classification { .. } => {
            let ls = tape.log_softmax(pred);
            let weighted = tape.mul_const(ls, targets.clone());
            let total = tape.sum_all(weighted);
            Ok(tape.scale(total, -1.0 / n as f64))
        }
    }
}

/// A scalar zero node, for terms that contribute nothing this iteration.
fn zero_scalar(tape: &mut Tape) -> NodeId {
    let leaf = tape.leaf(Array2::zeros((1, 1)));
    tape.sum_all(leaf)
}

/// Supervised loss on a labelled batch.
pub fn source_supervised(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    x: &Array3<f64>,
    y: &Array1<f64>,
    training: bool,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<NodeId> {
    if x.dim().0 == 0 {
        return Err(Error::Empty("source_supervised on an empty batch".into()));
    }
    if x.dim().0 != y.len() {
        return Err(Error::Shape(format!(
            "batch of {} windows with {} labels",
            x.dim().0,
            y.len()
        )));
    }
    let targets = labels_to_targets(y, model.config.task)?;
    let features = model.encode(tape, bound, x, training, dropout_rng)?;
    let pred = model.predict(tape, bound, features.g);
    base_loss(tape, pred, &targets, model.config.task)
}

/// Manifold mixup loss within one batch: features mixed against a permuted
/// copy of themselves, labels mixed identically.
pub fn manifold_mixup(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    x: &Array3<f64>,
    y: &Array1<f64>,
    lam: f64,
    perm: &[usize],
    training: bool,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<NodeId> {
    let n = x.dim().0;
    if n < 2 {
        log::warn!("mixup on a batch of {n}: contributing 0");
        return Ok(zero_scalar(tape));
    }
    if perm.len() != n {
        return Err(Error::Shape(format!(
            "pairing permutation of {} for batch of {n}",
            perm.len()
        )));
    }
    let targets = labels_to_targets(y, model.config.task)?;
    let targets_perm = Array2::from_shape_fn(targets.dim(), |(i, j)| targets[(perm[i], j)]);
    let mixed_targets = mix(&targets, &targets_perm, lam)?;

    let features = model.encode(tape, bound, x, training, dropout_rng)?;
    let g_perm = tape.gather_rows(features.g, perm.to_vec());
    let g_mix = tape.lincomb(features.g, g_perm, lam, 1.0 - lam);
    let pred = model.predict(tape, bound, g_mix);
    base_loss(tape, pred, &mixed_targets, model.config.task)
}

/// The masked, unmasked, and combined reconstruction losses.
pub struct ReconLosses {
    pub l_m: NodeId,
    pub l_um: NodeId,
    pub l_r: NodeId,
}

/// Controlled reconstruction: zero the masked time steps, encode, decode
/// every position, and score masked and unmasked positions separately.
/// Each side is a mean over its own positions; an empty side scores 0.
pub fn reconstruction_losses(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    x: &Array3<f64>,
    mask: &MaskSpec,
    gamma: f64,
    training: bool,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<ReconLosses> {
    let (n, m, k) = x.dim();
    if n == 0 {
        return Err(Error::Empty("reconstruction on an empty batch".into()));
    }
    if mask.mask.len() != k {
        return Err(Error::Shape(format!(
            "mask over {} steps for windows of {k}",
            mask.mask.len()
        )));
    }
    let mut x_masked = x.clone();
    for (t, &masked) in mask.mask.iter().enumerate() {
        if masked {
            x_masked.slice_mut(ndarray::s![.., .., t]).fill(0.0);
        }
    }
    let features = model.encode(tape, bound, &x_masked, training, dropout_rng)?;
    let recon = model.reconstruct(tape, bound, &features.seq)?;
    let target = pack_position_major(x);
    let diff = tape.sub_const(recon, target);
    let sq = tape.sqr(diff);

    let side = |tape: &mut Tape, want_masked: bool| -> NodeId {
        let cols: Vec<usize> = mask
            .mask
            .iter()
            .enumerate()
            .filter(|&(_, &is_masked)| is_masked == want_masked)
            .flat_map(|(t, _)| (0..m).map(move |ch| t * m + ch))
            .collect();
        if cols.is_empty() {
            zero_scalar(tape)
        } else {
            let sel = tape.gather_cols(sq, cols);
            tape.mean_all(sel)
        }
    };
    let l_m = side(tape, true);
    let l_um = side(tape, false);
    let l_r = tape.lincomb(l_m, l_um, gamma, 1.0 - gamma);
    Ok(ReconLosses { l_m, l_um, l_r })
}

/// Source-stage loss components and their weighted total.
pub struct SourceLosses {
    pub l_or: NodeId,
    pub l_mx: Option<NodeId>,
    pub recon: Option<ReconLosses>,
    pub total: NodeId,
}

/// Source-stage objective: supervised + alpha1 * mixup + alpha2 * recon.
/// A term with a zero weight is skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn source_total(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    x: &Array3<f64>,
    y: &Array1<f64>,
    lam: f64,
    perm: &[usize],
    mask: &MaskSpec,
    w: &LossWeights,
    training: bool,
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<SourceLosses> {
    let l_or = source_supervised(model, tape, bound, x, y, training, dropout_rng.as_deref_mut())?;
    let mut total = l_or;
    let l_mx = if w.alpha1 > 0.0 {
        let l = manifold_mixup(
            model, tape, bound, x, y, lam, perm, training, dropout_rng.as_deref_mut(),
        )?;
        let scaled = tape.scale(l, w.alpha1);
        total = tape.add(total, scaled);
        Some(l)
    } else {
        None
    };
    let recon = if w.alpha2 > 0.0 {
        let r = reconstruction_losses(
            model, tape, bound, x, mask, w.gamma, training, dropout_rng,
        )?;
        let scaled = tape.scale(r.l_r, w.alpha2);
        total = tape.add(total, scaled);
        Some(r)
    } else {
        None
    };
    Ok(SourceLosses { l_or, l_mx, recon, total })
}

/// Cross-domain mixup loss over position-paired source and target batches:
/// an input-level term and a feature-level term, both against the mixed
/// labels built from source labels and target pseudo-labels. Unequal batch
/// sizes truncate to the smaller.
#[allow(clippy::too_many_arguments)]
pub fn intermediate_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    x_s: &Array3<f64>,
    y_s: &Array1<f64>,
    x_t: &Array3<f64>,
    y_pseudo: &Array1<f64>,
    lam_tilde: f64,
    training: bool,
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<NodeId> {
    let n = x_s.dim().0.min(x_t.dim().0);
    if n == 0 {
        return Err(Error::Empty("intermediate loss on an empty batch".into()));
    }
    if x_s.dim().0 != x_t.dim().0 {
        log::warn!(
            "cross-domain batches of {} and {}: truncating to {n}",
            x_s.dim().0,
            x_t.dim().0
        );
    }
    let x_s = x_s.slice(ndarray::s![..n, .., ..]).to_owned();
    let x_t = x_t.slice(ndarray::s![..n, .., ..]).to_owned();
    let t_s = labels_to_targets(&y_s.slice(ndarray::s![..n]).to_owned(), model.config.task)?;
    let t_t = labels_to_targets(&y_pseudo.slice(ndarray::s![..n]).to_owned(), model.config.task)?;
    let mixed_targets = mix(&t_s, &t_t, lam_tilde)?;

    // input-level mixup
    let x_mixed = mix(&x_s, &x_t, lam_tilde)?;
    let f_in = model.encode(tape, bound, &x_mixed, training, dropout_rng.as_deref_mut())?;
    let pred_in = model.predict(tape, bound, f_in.g);
    let l_in = base_loss(tape, pred_in, &mixed_targets, model.config.task)?;

    // feature-level mixup
    let f_s = model.encode(tape, bound, &x_s, training, dropout_rng.as_deref_mut())?;
    let f_t = model.encode(tape, bound, &x_t, training, dropout_rng)?;
    let g_mix = tape.lincomb(f_s.g, f_t.g, lam_tilde, 1.0 - lam_tilde);
    let pred_ft = model.predict(tape, bound, g_mix);
    let l_ft = base_loss(tape, pred_ft, &mixed_targets, model.config.task)?;

    Ok(tape.add(l_in, l_ft))
}

/// Target-stage loss components and their weighted total.
pub struct TargetLosses {
    pub l_or: NodeId,
    pub l_mx: Option<NodeId>,
    pub total: NodeId,
}

/// Target self-training objective on a pseudo-labelled batch:
/// alpha4 * supervised + alpha5 * manifold mixup, both against the frozen
/// pseudo-labels. Confidence filtering happens before this call.
#[allow(clippy::too_many_arguments)]
pub fn target_total(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    x_t: &Array3<f64>,
    y_pseudo: &Array1<f64>,
    lam: f64,
    perm: &[usize],
    w: &LossWeights,
    training: bool,
    mut dropout_rng: Option<&mut SeededRng>,
) -> Result<TargetLosses> {
    let l_or = source_supervised(
        model, tape, bound, x_t, y_pseudo, training, dropout_rng.as_deref_mut(),
    )?;
    let mut total = tape.scale(l_or, w.alpha4);
    let l_mx = if w.alpha5 > 0.0 {
        let l = manifold_mixup(
            model, tape, bound, x_t, y_pseudo, lam, perm, training, dropout_rng,
        )?;
        let scaled = tape.scale(l, w.alpha5);
        total = tape.add(total, scaled);
        Some(l)
    } else {
        None
    };
    Ok(TargetLosses { l_or, l_mx, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, EncoderKind};
    use crate::rng::Stream;
    use ndarray::array;

    fn tiny_model(seed: u64) -> Model {
        let config = BackboneConfig {
            encoder_kind: EncoderKind::BidirectionalRecurrent,
            num_layers: 1,
            hidden_units: 4,
            predictor_widths: vec![3, 1],
            dropout_rate: 0.0,
            task: Task::Regression,
            num_classes: 1,
            input_channels: 2,
            window: 5,
            conv_layers: Vec::new(),
        };
        Model::init(config, seed).unwrap()
    }

    fn tiny_classifier(seed: u64) -> Model {
        let config = BackboneConfig {
            encoder_kind: EncoderKind::BidirectionalRecurrent,
            num_layers: 1,
            hidden_units: 4,
            predictor_widths: vec![3, 3],
            dropout_rate: 0.0,
            task: Task::Classification { num_classes: 3 },
            num_classes: 3,
            input_channels: 2,
            window: 5,
            conv_layers: Vec::new(),
        };
        Model::init(config, seed).unwrap()
    }

    fn batch(n: usize, m: usize, k: usize, seed: u64) -> Array3<f64> {
        let mut rng = SeededRng::new(seed, Stream::Synthetic);
        Array3::from_shape_fn((n, m, k), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn eval_scalar(model: &Model, f: impl Fn(&Model, &mut Tape, &Bound) -> NodeId) -> f64 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let node = f(model, &mut tape, &bound);
        tape.scalar(node)
    }

    #[test]
    fn mse_base_loss_arithmetic() {
        let mut tape = Tape::new();
        let pred = tape.leaf(array![[1.0], [2.0]]);
        let l = base_loss(&mut tape, pred, &array![[0.0], [0.0]], Task::Regression).unwrap();
        assert_eq!(tape.scalar(l), 2.5);

        let exact = tape.leaf(array![[3.0], [-1.0]]);
        let l0 = base_loss(&mut tape, exact, &array![[3.0], [-1.0]], Task::Regression).unwrap();
        assert_eq!(tape.scalar(l0), 0.0);
    }

    #[test]
    fn cross_entropy_margin_monotone() {
        let task = Task::Classification { num_classes: 3 };
        let targets = array![[1.0, 0.0, 0.0]];
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 3.0, 10.0] {
            let mut tape = Tape::new();
            let pred = tape.leaf(array![[margin, 0.0, 0.0]]);
            let l = base_loss(&mut tape, pred, &targets, task).unwrap();
            let v = tape.scalar(l);
            assert!(v < prev, "margin {margin}: {v} !< {prev}");
            assert!(v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn empty_batch_is_fatal() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Array2::zeros((0, 1)));
        assert!(base_loss(&mut tape, pred, &Array2::zeros((0, 1)), Task::Regression).is_err());
    }

    #[test]
    fn constant_zero_predictor_on_capped_labels() {
        let mut model = tiny_model(5);
        // zero the last head layer: predictions become exactly 0
        let shapes = model.config.param_shapes();
        for (i, (name, _)) in shapes.iter().enumerate() {
            if name.starts_with("head1") {
                model.params.tensors[i].fill(0.0);
            }
        }
        let x = batch(4, 2, 5, 1);
        let y = Array1::from_elem(4, 125.0);
        let l = eval_scalar(&model, |m, tape, bound| {
            source_supervised(m, tape, bound, &x, &y, false, None).unwrap()
        });
        assert_eq!(l, 15625.0);
    }

    #[test]
    fn supervised_matches_hand_computation() {
        let model = tiny_model(11);
        let x = batch(3, 2, 5, 2);
        let y = array![1.0, -0.5, 2.0];
        let l = eval_scalar(&model, |m, tape, bound| {
            source_supervised(m, tape, bound, &x, &y, false, None).unwrap()
        });
        // independent composition: eval-mode forward, then plain MSE
        let pred = model.predict_array(&x).unwrap();
        let hand = (0..3).map(|i| (pred[(i, 0)] - y[i]).powi(2)).sum::<f64>() / 3.0;
        assert!((l - hand).abs() < 1e-12, "{l} vs {hand}");
    }

    /// Run the predictor head by hand on a feature matrix.
    fn hand_head(model: &Model, g: &Array2<f64>) -> Array2<f64> {
        let shapes = model.config.param_shapes();
        let tensor = |name: &str| {
            let i = shapes.iter().position(|(n, _)| n == name).unwrap();
            &model.params.tensors[i]
        };
        let h = (g.dot(tensor("head0.w")) + tensor("head0.bias"))
            .mapv(|v: f64| v.max(0.0));
        h.dot(tensor("head1.w")) + tensor("head1.bias")
    }

    #[test]
    fn mixup_half_matches_manual_forward() {
        let model = tiny_model(21);
        let x = batch(2, 2, 5, 3);
        let y = array![3.0, -1.0];
        let perm = vec![1, 0];
        let l = eval_scalar(&model, |m, tape, bound| {
            manifold_mixup(m, tape, bound, &x, &y, 0.5, &perm, false, None).unwrap()
        });
        // by hand: mix embeddings of the two samples, push through the head
        let g = model.embed_array(&x).unwrap();
        let mut g_mix = Array2::zeros((2, 8));
        for i in 0..2 {
            for j in 0..8 {
                g_mix[(i, j)] = 0.5 * g[(i, j)] + 0.5 * g[(perm[i], j)];
            }
        }
        let pred = hand_head(&model, &g_mix);
        let y_mix = [0.5 * 3.0 + 0.5 * -1.0, 0.5 * -1.0 + 0.5 * 3.0];
        let hand = (0..2).map(|i| (pred[(i, 0)] - y_mix[i]).powi(2)).sum::<f64>() / 2.0;
        assert!((l - hand).abs() < 1e-12, "{l} vs {hand}");
    }

    #[test]
    fn mixup_endpoints_reduce_to_supervised() {
        let model = tiny_model(31);
        let x = batch(5, 2, 5, 4);
        let y = array![1.0, 2.0, 3.0, 4.0, 5.0];
        let perm = vec![2, 0, 4, 1, 3];
        let sup = eval_scalar(&model, |m, tape, bound| {
            source_supervised(m, tape, bound, &x, &y, false, None).unwrap()
        });
        let at_one = eval_scalar(&model, |m, tape, bound| {
            manifold_mixup(m, tape, bound, &x, &y, 1.0, &perm, false, None).unwrap()
        });
        assert!((at_one - sup).abs() < 1e-12);

        // lam = 0: supervised loss on the permuted batch = same mean
        let at_zero = eval_scalar(&model, |m, tape, bound| {
            manifold_mixup(m, tape, bound, &x, &y, 0.0, &perm, false, None).unwrap()
        });
        assert!((at_zero - sup).abs() < 1e-12);
    }

    #[test]
    fn singleton_batch_mixup_contributes_zero() {
        let model = tiny_model(1);
        let x = batch(1, 2, 5, 5);
        let y = array![2.0];
        let l = eval_scalar(&model, |m, tape, bound| {
            manifold_mixup(m, tape, bound, &x, &y, 0.3, &[0], false, None).unwrap()
        });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn recon_all_unmasked_zeroes_masked_side() {
        let model = tiny_model(41);
        let x = batch(3, 2, 5, 6);
        let mask = MaskSpec::from_mask(vec![false; 5]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let r = reconstruction_losses(&model, &mut tape, &bound, &x, &mask, 0.25, false, None)
            .unwrap();
        assert_eq!(tape.scalar(r.l_m), 0.0);
        let l_um = tape.scalar(r.l_um);
        let l_r = tape.scalar(r.l_r);
        assert!((l_r - 0.75 * l_um).abs() < 1e-12);
    }

    #[test]
    fn recon_convex_combination_bounds() {
        let model = tiny_model(43);
        let x = batch(4, 2, 5, 7);
        let mask = MaskSpec::from_mask(vec![true, false, true, false, false]);
        for gamma in [0.0, 0.3, 0.5, 1.0] {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let r = reconstruction_losses(&model, &mut tape, &bound, &x, &mask, gamma, false, None)
                .unwrap();
            let (l_m, l_um, l_r) = (tape.scalar(r.l_m), tape.scalar(r.l_um), tape.scalar(r.l_r));
            assert!(l_r >= l_m.min(l_um) - 1e-12 && l_r <= l_m.max(l_um) + 1e-12);
            assert!((l_r - (gamma * l_m + (1.0 - gamma) * l_um)).abs() < 1e-12);
        }
    }

    #[test]
    fn recon_restricted_mean_oracle() {
        // decoder zeroed: reconstruction is identically 0, so each side's
        // loss is the mean square of the original values at its positions
        let mut model = tiny_model(47);
        let n = model.params.tensors.len();
        model.params.tensors[n - 2].fill(0.0);
        model.params.tensors[n - 1].fill(0.0);
        let x = batch(3, 2, 5, 8);
        let mask = MaskSpec::from_mask(vec![true, true, false, false, false]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let r = reconstruction_losses(&model, &mut tape, &bound, &x, &mask, 0.5, false, None)
            .unwrap();
        let mean_sq = |steps: &[usize]| {
            let mut acc = 0.0;
            let mut count = 0;
            for b in 0..3 {
                for ch in 0..2 {
                    for &t in steps {
                        acc += x[(b, ch, t)] * x[(b, ch, t)];
                        count += 1;
                    }
                }
            }
            acc / count as f64
        };
        assert!((tape.scalar(r.l_m) - mean_sq(&[0, 1])).abs() < 1e-12);
        assert!((tape.scalar(r.l_um) - mean_sq(&[2, 3, 4])).abs() < 1e-12);
    }

    #[test]
    fn source_total_weighted_sum_and_zero_weights() {
        let model = tiny_model(53);
        let x = batch(4, 2, 5, 9);
        let y = array![1.0, 2.0, 3.0, 4.0];
        let perm = vec![3, 2, 1, 0];
        let mask = MaskSpec::from_mask(vec![true, false, false, true, false]);
        let w = LossWeights::default();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let s = source_total(
            &model, &mut tape, &bound, &x, &y, 0.4, &perm, &mask, &w, false, None,
        )
        .unwrap();
        let l_or = tape.scalar(s.l_or);
        let l_mx = tape.scalar(s.l_mx.unwrap());
        let l_r = tape.scalar(s.recon.as_ref().unwrap().l_r);
        let total = tape.scalar(s.total);
        assert!((total - (l_or + 0.5 * l_mx + 0.5 * l_r)).abs() < 1e-12);

        // zero weights: total equals plain supervised, terms absent
        let w0 = LossWeights { alpha1: 0.0, alpha2: 0.0, ..w };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let s0 = source_total(
            &model, &mut tape, &bound, &x, &y, 0.4, &perm, &mask, &w0, false, None,
        )
        .unwrap();
        assert!(s0.l_mx.is_none() && s0.recon.is_none());
        assert_eq!(tape.scalar(s0.total), tape.scalar(s0.l_or));
        assert!((tape.scalar(s0.total) - l_or).abs() < 1e-12);
    }

    #[test]
    fn intermediate_endpoints() {
        let model = tiny_model(61);
        let x_s = batch(3, 2, 5, 10);
        let y_s = array![1.0, 2.0, 3.0];
        let x_t = batch(3, 2, 5, 11);
        let y_t = array![0.5, 1.5, 2.5];

        let sup_s = eval_scalar(&model, |m, tape, bound| {
            source_supervised(m, tape, bound, &x_s, &y_s, false, None).unwrap()
        });
        let at_one = eval_scalar(&model, |m, tape, bound| {
            intermediate_loss(m, tape, bound, &x_s, &y_s, &x_t, &y_t, 1.0, false, None).unwrap()
        });
        assert!((at_one - 2.0 * sup_s).abs() < 1e-12, "{at_one} vs 2*{sup_s}");

        let sup_t = eval_scalar(&model, |m, tape, bound| {
            source_supervised(m, tape, bound, &x_t, &y_t, false, None).unwrap()
        });
        let at_zero = eval_scalar(&model, |m, tape, bound| {
            intermediate_loss(m, tape, bound, &x_s, &y_s, &x_t, &y_t, 0.0, false, None).unwrap()
        });
        assert!((at_zero - 2.0 * sup_t).abs() < 1e-12, "{at_zero} vs 2*{sup_t}");
    }

    #[test]
    fn intermediate_single_pair_oracle() {
        let model = tiny_model(67);
        let x_s = batch(1, 2, 5, 12);
        let x_t = batch(1, 2, 5, 13);
        let y_s = array![2.0];
        let y_t = array![-1.0];
        let lam = 0.3;
        let l = eval_scalar(&model, |m, tape, bound| {
            intermediate_loss(m, tape, bound, &x_s, &y_s, &x_t, &y_t, lam, false, None).unwrap()
        });
        // by hand, both terms
        let y_mix = lam * 2.0 + (1.0 - lam) * -1.0;
        let x_mix = {
            let mut v = x_s.clone();
            v.zip_mut_with(&x_t, |a, &b| *a = lam * *a + (1.0 - lam) * b);
            v
        };
        let p_in = model.predict_array(&x_mix).unwrap()[(0, 0)];
        let g_s = model.embed_array(&x_s).unwrap();
        let g_t = model.embed_array(&x_t).unwrap();
        let g_mix = &g_s * lam + &g_t * (1.0 - lam);
        let p_ft = hand_head(&model, &g_mix)[(0, 0)];
        let hand = (p_in - y_mix).powi(2) + (p_ft - y_mix).powi(2);
        assert!((l - hand).abs() < 1e-12, "{l} vs {hand}");
    }

    #[test]
    fn intermediate_truncates_unequal_batches() {
        let model = tiny_model(71);
        let x_s = batch(4, 2, 5, 14);
        let y_s = array![1.0, 2.0, 3.0, 4.0];
        let x_t = batch(2, 2, 5, 15);
        let y_t = array![0.5, 1.5];
        let l_big = eval_scalar(&model, |m, tape, bound| {
            intermediate_loss(m, tape, bound, &x_s, &y_s, &x_t, &y_t, 0.6, false, None).unwrap()
        });
        let x_s2 = x_s.slice(ndarray::s![..2, .., ..]).to_owned();
        let y_s2 = array![1.0, 2.0];
        let l_cut = eval_scalar(&model, |m, tape, bound| {
            intermediate_loss(m, tape, bound, &x_s2, &y_s2, &x_t, &y_t, 0.6, false, None).unwrap()
        });
        assert!((l_big - l_cut).abs() < 1e-12);
    }

    #[test]
    fn target_total_is_weighted_sum() {
        let model = tiny_model(73);
        let x = batch(3, 2, 5, 16);
        let y = array![1.0, 2.0, 3.0];
        let perm = vec![1, 2, 0];
        let w = LossWeights { alpha4: 2.0, alpha5: 0.5, ..LossWeights::default() };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let t = target_total(&model, &mut tape, &bound, &x, &y, 0.7, &perm, &w, false, None)
            .unwrap();
        let l_or = tape.scalar(t.l_or);
        let l_mx = tape.scalar(t.l_mx.unwrap());
        assert!((tape.scalar(t.total) - (2.0 * l_or + 0.5 * l_mx)).abs() < 1e-12);
    }

    #[test]
    fn self_labelled_target_supervised_is_zero() {
        let model = tiny_model(79);
        let x = batch(3, 2, 5, 17);
        let pred = model.predict_array(&x).unwrap();
        let y_pseudo = Array1::from_iter(pred.column(0).iter().cloned());
        let l = eval_scalar(&model, |m, tape, bound| {
            source_supervised(m, tape, bound, &x, &y_pseudo, false, None).unwrap()
        });
        assert!(l.abs() < 1e-24);
    }

    #[test]
    fn classification_losses_finite_and_nonnegative() {
        let model = tiny_classifier(83);
        let x = batch(4, 2, 5, 18);
        let y = array![0.0, 1.0, 2.0, 1.0];
        let perm = vec![2, 3, 0, 1];
        let mask = MaskSpec::from_mask(vec![true, false, true, false, false]);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let s = source_total(
            &model, &mut tape, &bound, &x, &y, 0.5, &perm, &mask, &w, false, None,
        )
        .unwrap();
        let total = tape.scalar(s.total);
        assert!(total.is_finite() && total >= 0.0);

        let l_cd = eval_scalar(&model, |m, tape, bound| {
            intermediate_loss(m, tape, bound, &x, &y, &x, &y, 0.4, false, None).unwrap()
        });
        assert!(l_cd.is_finite() && l_cd >= 0.0);
    }

    #[test]
    fn bad_class_label_rejected() {
        assert!(labels_to_targets(&array![0.0, 3.0], Task::Classification { num_classes: 3 })
            .is_err());
        assert!(labels_to_targets(&array![0.5], Task::Classification { num_classes: 3 }).is_err());
    }

    // gradient checks for every loss on the tiny backbone

    fn grad_check(
        model: &Model,
        forward: &dyn Fn(&Model, &mut Tape, &Bound) -> NodeId,
    ) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let node = forward(model, &mut tape, &bound);
        let grads = tape.backward(node).unwrap();

        let eps = 1e-5;
        let mut rng = SeededRng::new(123, Stream::Init);
        for _ in 0..10 {
            let ti = rng.random_range(0..model.params.tensors.len());
            let t = &model.params.tensors[ti];
            let r = rng.random_range(0..t.nrows());
            let c = rng.random_range(0..t.ncols());
            let perturbed = |delta: f64| {
                let mut m = model.clone();
                m.params.tensors[ti][(r, c)] += delta;
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape);
                let node = forward(&m, &mut tape, &bound);
                tape.scalar(node)
            };
            let numeric = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
            let analytic = grads.get(bound.ids[ti], t.dim())[(r, c)];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "tensor {ti} ({r},{c}): {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn gradients_source_supervised() {
        let model = tiny_model(101);
        let x = batch(3, 2, 5, 20);
        let y = array![1.0, -2.0, 0.5];
        grad_check(&model, &|m, tape, bound| {
            source_supervised(m, tape, bound, &x, &y, false, None).unwrap()
        });
    }

    #[test]
    fn gradients_source_mixup() {
        let model = tiny_model(103);
        let x = batch(3, 2, 5, 21);
        let y = array![1.0, -2.0, 0.5];
        let perm = vec![2, 0, 1];
        grad_check(&model, &|m, tape, bound| {
            manifold_mixup(m, tape, bound, &x, &y, 0.37, &perm, false, None).unwrap()
        });
    }

    #[test]
    fn gradients_reconstruction() {
        let model = tiny_model(107);
        let x = batch(3, 2, 5, 22);
        let mask = MaskSpec::from_mask(vec![true, false, true, false, false]);
        grad_check(&model, &|m, tape, bound| {
            reconstruction_losses(m, tape, bound, &x, &mask, 0.5, false, None)
                .unwrap()
                .l_r
        });
    }

    #[test]
    fn gradients_source_total() {
        let model = tiny_model(109);
        let x = batch(3, 2, 5, 23);
        let y = array![1.0, -2.0, 0.5];
        let perm = vec![1, 2, 0];
        let mask = MaskSpec::from_mask(vec![false, true, false, true, true]);
        let w = LossWeights::default();
        grad_check(&model, &|m, tape, bound| {
            source_total(m, tape, bound, &x, &y, 0.62, &perm, &mask, &w, false, None)
                .unwrap()
                .total
        });
    }

    #[test]
    fn gradients_intermediate() {
        let model = tiny_model(113);
        let x_s = batch(3, 2, 5, 24);
        let y_s = array![1.0, -2.0, 0.5];
        let x_t = batch(3, 2, 5, 25);
        let y_t = array![0.0, 1.0, -1.0];
        grad_check(&model, &|m, tape, bound| {
            intermediate_loss(m, tape, bound, &x_s, &y_s, &x_t, &y_t, 0.45, false, None).unwrap()
        });
    }

    #[test]
    fn gradients_target_total() {
        let model = tiny_model(127);
        let x = batch(3, 2, 5, 26);
        let y = array![0.3, -0.7, 1.1];
        let perm = vec![2, 0, 1];
        let w = LossWeights::default();
        grad_check(&model, &|m, tape, bound| {
            target_total(m, tape, bound, &x, &y, 0.52, &perm, &w, false, None)
                .unwrap()
                .total
        });
    }

    #[test]
    fn gradients_classification_total() {
        let model = tiny_classifier(131);
        let x = batch(3, 2, 5, 27);
        let y = array![0.0, 2.0, 1.0];
        let perm = vec![1, 2, 0];
        let mask = MaskSpec::from_mask(vec![true, false, false, true, false]);
        let w = LossWeights::default();
        grad_check(&model, &|m, tape, bound| {
            source_total(m, tape, bound, &x, &y, 0.41, &perm, &mask, &w, false, None)
                .unwrap()
                .total
        });
    }
}
