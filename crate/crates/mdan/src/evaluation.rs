//! Metrics (RMSE, the asymmetric Score in both printed and standard
//! conventions, accuracy), a Gaussian KL probe over embedding sets, and
//! embedding export for external projection tools.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which reading of the Score formula to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreConvention {
    /// exp((d)/13 - 1) early / exp(d/10 - 1) late, as printed.
    PaperLiteral,
    /// exp(-d/13) - 1 early / exp(d/10) - 1 late, the standard benchmark form.
    #[default]
    Nasa,
}

impl std::str::FromStr for ScoreConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper-literal" | "paper_literal" | "paper" => Ok(ScoreConvention::PaperLiteral),
            "nasa" => Ok(ScoreConvention::Nasa),
            other => Err(Error::Config(format!("unknown score convention: {other}"))),
        }
    }
}

/// Metric bundle for one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub score_paper: f64,
    pub score_nasa: f64,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub n: usize,
}

impl MetricReport {
    /// Key/value text rendering, one metric per line.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "n: {}\nrmse: {:.6}\nscore_paper: {:.6}\nscore_nasa: {:.6}\n",
            self.n, self.rmse, self.score_paper, self.score_nasa
        );
        if let Some(acc) = self.accuracy {
            s.push_str(&format!("accuracy: {acc:.6}\n"));
        }
        s
    }
}

/// Before/after domain-discrepancy probe values for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLProbeResult {
    pub before: f64,
    pub after: f64,
    pub scenario: String,
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Empty("metric over an empty prediction set".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Root of the mean squared residual.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let mse = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse.sqrt())
}

const EXP_CLIP: f64 = 700.0;

fn clip_exp(e: f64) -> f64 {
    if e > EXP_CLIP {
        log::warn!("score exponent {e} clipped at {EXP_CLIP}");
        EXP_CLIP.exp()
    } else {
        e.exp()
    }
}

/// Asymmetric RUL score; mean over samples unless `sum` is set.
pub fn score(y: &[f64], y_hat: &[f64], convention: ScoreConvention, sum: bool) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let total: f64 = y
        .iter()
        .zip(y_hat)
        .map(|(&yi, &hi)| {
            let d = hi - yi;
            match convention {
                ScoreConvention::PaperLiteral => {
                    if d < 0.0 {
                        clip_exp(d / 13.0 - 1.0)
                    } else {
                        clip_exp(d / 10.0 - 1.0)
                    }
                }
                ScoreConvention::Nasa => {
                    if d < 0.0 {
                        clip_exp(-d / 13.0) - 1.0
                    } else {
                        clip_exp(d / 10.0) - 1.0
                    }
                }
            }
        })
        .sum();
    Ok(if sum { total } else { total / y.len() as f64 })
}

/// Fraction of exact class matches.
pub fn accuracy(labels: &[f64], predictions: &[f64]) -> Result<f64> {
    check_lengths(labels, predictions)?;
    let hits = labels
        .iter()
        .zip(predictions)
        .filter(|(a, b)| **a == **b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Full metric bundle; `accuracy` is filled only when both vectors hold
/// integral class labels and `classification` is set.
pub fn metric_report(
    y: &[f64],
    y_hat: &[f64],
    classification: bool,
    sum_scores: bool,
) -> Result<MetricReport> {
    Ok(MetricReport {
        rmse: rmse(y, y_hat)?,
        score_paper: score(y, y_hat, ScoreConvention::PaperLiteral, sum_scores)?,
        score_nasa: score(y, y_hat, ScoreConvention::Nasa, sum_scores)?,
        accuracy: if classification {
            Some(accuracy(y, y_hat)?)
        } else {
            None
        },
        n: y.len(),
    })
}

const VARIANCE_FLOOR: f64 = 1e-6;

fn diag_gaussian(emb: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = emb.nrows().max(1) as f64;
    let mean = emb.sum_axis(ndarray::Axis(0)) / n;
    let mut var = Array1::zeros(emb.ncols());
    for row in emb.rows() {
        for (j, &v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.mapv_inplace(|v| {
        let v = v / n;
        if v < VARIANCE_FLOOR {
            log::warn!("kl probe: variance {v} floored at {VARIANCE_FLOOR}");
            VARIANCE_FLOOR
        } else {
            v
        }
    });
    (mean, var)
}

/// Closed-form KL(source || target) between diagonal Gaussians fitted to
/// the two embedding sets.
pub fn kl_probe(source_emb: &Array2<f64>, target_emb: &Array2<f64>) -> Result<f64> {
    if source_emb.nrows() == 0 || target_emb.nrows() == 0 {
        return Err(Error::Empty("kl probe over an empty embedding set".into()));
    }
    if source_emb.ncols() != target_emb.ncols() {
        return Err(Error::Shape(format!(
            "embedding dims {} vs {}",
            source_emb.ncols(),
            target_emb.ncols()
        )));
    }
    if source_emb.nrows() < 2 || target_emb.nrows() < 2 {
        log::warn!("kl probe on fewer than 2 samples per side; variances floored");
    }
    let (mu_s, var_s) = diag_gaussian(source_emb);
    let (mu_t, var_t) = diag_gaussian(target_emb);
    let mut kl = 0.0;
    for j in 0..mu_s.len() {
        let d = mu_s[j] - mu_t[j];
        kl += 0.5 * ((var_t[j] / var_s[j]).ln() + (var_s[j] + d * d) / var_t[j] - 1.0);
    }
    Ok(kl.max(0.0))
}

/// Write `(domain, label, feature...)` rows, one per sample, as CSV.
pub fn export_embeddings(
    path: &Path,
    sets: &[(&str, &[f64], &Array2<f64>)],
) -> Result<()> {
    let dim = sets.iter().map(|(_, _, e)| e.ncols()).max().unwrap_or(0);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("domain,label");
    for j in 0..dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for (domain, labels, emb) in sets {
        if labels.len() != emb.nrows() {
            return Err(Error::Shape(format!(
                "domain {domain}: {} labels vs {} embeddings",
                labels.len(),
                emb.nrows()
            )));
        }
        for (i, row) in emb.rows().into_iter().enumerate() {
            let mut line = format!("{domain},{}", labels[i]);
            for v in row {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeededRng, Stream};
    use rand::Rng;

    #[test]
    fn rmse_arithmetic() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let v = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_permutation_and_scaling() {
        let y = [1.0, 5.0, -2.0, 8.0];
        let h = [2.0, 4.5, 0.0, 9.0];
        let a = rmse(&y, &h).unwrap();
        let b = rmse(&[8.0, 1.0, 5.0, -2.0], &[9.0, 2.0, 4.5, 0.0]).unwrap();
        assert_eq!(a, b);
        // doubling every residual doubles the rmse
        let h2: Vec<f64> = y.iter().zip(&h).map(|(yi, hi)| yi + 2.0 * (hi - yi)).collect();
        assert!((rmse(&y, &h2).unwrap() - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn score_conventions_at_reference_points() {
        // exact predictions
        assert_eq!(score(&[5.0], &[5.0], ScoreConvention::Nasa, false).unwrap(), 0.0);
        let lit = score(&[5.0], &[5.0], ScoreConvention::PaperLiteral, false).unwrap();
        assert!((lit - (-1.0f64).exp()).abs() < 1e-12);
        // late by 10, standard convention: e - 1
        let late = score(&[0.0], &[10.0], ScoreConvention::Nasa, false).unwrap();
        assert!((late - (1f64.exp() - 1.0)).abs() < 1e-12);
        // early by 13: e - 1 as well (different divisor)
        let early = score(&[13.0], &[0.0], ScoreConvention::Nasa, false).unwrap();
        assert!((early - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn score_sum_is_n_times_mean() {
        let y = [10.0, 20.0, 30.0];
        let h = [12.0, 15.0, 33.0];
        for conv in [ScoreConvention::Nasa, ScoreConvention::PaperLiteral] {
            let mean = score(&y, &h, conv, false).unwrap();
            let total = score(&y, &h, conv, true).unwrap();
            assert!((total - 3.0 * mean).abs() < 1e-12);
        }
    }

    #[test]
    fn score_overflow_clipped() {
        let v = score(&[0.0], &[1e6], ScoreConvention::Nasa, false).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn metric_oracles_brute_force() {
        // independent straight-line reimplementation over random vectors
        let mut rng = SeededRng::new(7, Stream::Synthetic);
        for _ in 0..25 {
            let n = rng.random_range(1..80);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..130.0)).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..130.0)).collect();

            let mut acc = 0.0;
            for i in 0..n {
                acc += (h[i] - y[i]) * (h[i] - y[i]);
            }
            let want_rmse = (acc / n as f64).sqrt();
            assert!((rmse(&y, &h).unwrap() - want_rmse).abs() < 1e-10);

            let mut s_nasa = 0.0;
            let mut s_lit = 0.0;
            for i in 0..n {
                let d = h[i] - y[i];
                s_nasa += if d < 0.0 { (-d / 13.0).exp() - 1.0 } else { (d / 10.0).exp() - 1.0 };
                s_lit += if d < 0.0 { (d / 13.0 - 1.0).exp() } else { (d / 10.0 - 1.0).exp() };
            }
            let nf = n as f64;
            assert!((score(&y, &h, ScoreConvention::Nasa, false).unwrap() - s_nasa / nf).abs() < 1e-10);
            assert!((score(&y, &h, ScoreConvention::PaperLiteral, false).unwrap() - s_lit / nf).abs() < 1e-10);
        }
    }

    #[test]
    fn score_orderings_agree_within_branch() {
        let y = vec![50.0; 8];
        let small: Vec<f64> = y.iter().map(|v| v + 3.0).collect();
        let big: Vec<f64> = y.iter().map(|v| v + 9.0).collect();
        for conv in [ScoreConvention::Nasa, ScoreConvention::PaperLiteral] {
            let a = score(&y, &small, conv, false).unwrap();
            let b = score(&y, &big, conv, false).unwrap();
            assert!(a < b, "{conv:?}: {a} !< {b}");
        }
    }

    #[test]
    fn accuracy_extremes_and_law_of_large_numbers() {
        assert_eq!(accuracy(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());

        let mut rng = SeededRng::new(3, Stream::Synthetic);
        let n = 10_000;
        let labels: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0..3) as f64).collect();
        let acc = accuracy(&labels, &preds).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.02, "acc {acc}");
    }

    #[test]
    fn kl_identical_sets_is_zero() {
        let mut rng = SeededRng::new(5, Stream::Synthetic);
        let emb = Array2::from_shape_fn((40, 6), |_| rng.random::<f64>());
        let kl = kl_probe(&emb, &emb).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_unit_gaussians_shifted_by_one() {
        // large samples from N(0,1) and N(1,1): KL approx 0.5
        let mut rng = SeededRng::new(9, Stream::Synthetic);
        let normal = |rng: &mut SeededRng| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let a = Array2::from_shape_fn((60_000, 1), |_| normal(&mut rng));
        let b = Array2::from_shape_fn((60_000, 1), |_| normal(&mut rng) + 1.0);
        let kl = kl_probe(&a, &b).unwrap();
        assert!((kl - 0.5).abs() < 0.03, "kl {kl}");
    }

    #[test]
    fn kl_exact_closed_form_on_constructed_moments() {
        // two-point sets give exact means/variances for a hand-checkable KL
        let a = ndarray::array![[0.0], [2.0]]; // mean 1, var 1
        let b = ndarray::array![[1.0], [5.0]]; // mean 3, var 4
        let kl = kl_probe(&a, &b).unwrap();
        let want = 0.5 * ((4.0f64 / 1.0).ln() + (1.0 + 4.0) / 4.0 - 1.0);
        assert!((kl - want).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_variance_floored_not_fatal() {
        let a = Array2::from_elem((5, 2), 1.0);
        let b = Array2::from_elem((5, 2), 1.5);
        let kl = kl_probe(&a, &b).unwrap();
        assert!(kl.is_finite() && kl >= 0.0);
    }

    #[test]
    fn embedding_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let mut rng = SeededRng::new(1, Stream::Synthetic);
        let src = Array2::from_shape_fn((100, 64), |_| rng.random::<f64>());
        let tgt = Array2::from_shape_fn((100, 64), |_| rng.random::<f64>());
        let ls: Vec<f64> = (0..100).map(|i| i as f64).collect();
        export_embeddings(&path, &[("source", &ls, &src), ("target", &ls, &tgt)]).unwrap();

        let mut reader = csv::Reader::from_path(&path).unwrap();
        assert_eq!(reader.headers().unwrap().len(), 66);
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 200);
        assert_eq!(&rows[0][0], "source");
        let v: f64 = rows[42][2].parse().unwrap();
        assert_eq!(v, src[(42, 0)]);
    }

    #[test]
    fn embedding_export_empty_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        export_embeddings(&path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn report_text_includes_accuracy_only_for_classification() {
        let r = metric_report(&[0.0, 1.0], &[0.0, 2.0], true, false).unwrap();
        assert!(r.to_text().contains("accuracy"));
        let r = metric_report(&[10.0, 20.0], &[11.0, 19.0], false, false).unwrap();
        assert!(!r.to_text().contains("accuracy"));
        assert_eq!(r.n, 2);
    }
}
