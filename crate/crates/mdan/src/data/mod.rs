//! Dataset ingestion and preparation: sensor selection, min-max
//! normalization, sliding-window extraction and piecewise-linear RUL labels.

mod cmapss;
mod mfd;
mod synthetic;
mod window;

pub use cmapss::{
    cmapss_table_counts, load_cmapss, load_cmapss_with, write_cmapss_fixture, write_cmapss_format,
    CmapssOptions, CmapssSubset,
};
pub use mfd::{load_mfd, load_mfd_with, MfdCondition, MfdOptions};
pub use synthetic::{make_synthetic_pair, make_synthetic_pair_with, ShiftSpec, SyntheticSpec};
pub use window::{make_windows, window_count};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prediction task of a domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

/// One raw row of a run-to-failure record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub unit_id: u32,
    pub cycle: u32,
    pub op_settings: [f64; 3],
    pub sensors: Vec<f64>,
}

/// One sliding-window slice: `x` is sensors x time steps.
#[derive(Debug, Clone)]
pub struct WindowedSample {
    pub x: Array2<f64>,
    /// RUL for regression; class index (as f64) for classification.
    pub y: f64,
    pub is_pseudo: bool,
}

/// Per-sensor min/max fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_sensor_min: Vec<f64>,
    pub per_sensor_max: Vec<f64>,
}

/// A normalized, windowed collection for one domain.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub name: String,
    pub task: Task,
    pub train: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub stats: NormalizationStats,
    /// Units dropped because they were shorter than the window.
    pub skipped_units: usize,
}

impl DomainDataset {
    /// Sensor count / window size shared by all samples.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.train
            .first()
            .or_else(|| self.test.first())
            .map(|s| s.x.dim())
    }
}

/// The informative C-MAPSS channels, 0-based into the 21 raw sensors:
/// S2, S3, S4, S7, S8, S9, S11, S12, S13, S14, S15, S17, S20, S21.
pub const CMAPSS_SELECTED_SENSORS: [usize; 14] = [1, 2, 3, 6, 7, 8, 10, 11, 12, 13, 14, 16, 19, 20];

/// Number of raw sensor channels in the C-MAPSS format.
pub const CMAPSS_RAW_SENSORS: usize = 21;

/// Keep the 14 informative channels, in the listed order.
///
/// Rejects records that do not carry the full 21 raw channels, so applying
/// the selection twice fails rather than silently re-projecting.
pub fn select_sensors(records: &[RunRecord]) -> Result<Vec<RunRecord>> {
    records
        .iter()
        .map(|r| {
            if r.sensors.len() != CMAPSS_RAW_SENSORS {
                return Err(Error::Shape(format!(
                    "sensor selection expects {} channels, got {}",
                    CMAPSS_RAW_SENSORS,
                    r.sensors.len()
                )));
            }
            Ok(RunRecord {
                sensors: CMAPSS_SELECTED_SENSORS
                    .iter()
                    .map(|&i| r.sensors[i])
                    .collect(),
                ..r.clone()
            })
        })
        .collect()
}

/// Piecewise-linear RUL: cap the true RUL at `cap`.
pub fn piecewise_rul(true_rul: f64, cap: f64) -> f64 {
    debug_assert!(true_rul >= 0.0 && cap > 0.0);
    true_rul.min(cap)
}

/// Fit per-sensor min/max over a set of training windows.
pub fn fit_minmax<'a, I>(train_windows: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a WindowedSample>,
{
    let mut min: Vec<f64> = Vec::new();
    let mut max: Vec<f64> = Vec::new();
    let mut seen = false;
    for w in train_windows {
        let (m, _) = w.x.dim();
        if !seen {
            min = vec![f64::INFINITY; m];
            max = vec![f64::NEG_INFINITY; m];
            seen = true;
        }
        for (j, row) in w.x.rows().into_iter().enumerate() {
            for &v in row {
                if v < min[j] {
                    min[j] = v;
                }
                if v > max[j] {
                    max[j] = v;
                }
            }
        }
    }
    if !seen {
        return Err(Error::Empty("fit_minmax: no training windows".into()));
    }
    Ok(NormalizationStats {
        per_sensor_min: min,
        per_sensor_max: max,
    })
}

/// Map each sensor into [0,1] using fitted stats; constant channels map to 0.
pub fn apply_minmax(x: &mut Array2<f64>, stats: &NormalizationStats) {
    for (j, mut row) in x.rows_mut().into_iter().enumerate() {
        let lo = stats.per_sensor_min[j];
        let hi = stats.per_sensor_max[j];
        let range = hi - lo;
        if range == 0.0 {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| (v - lo) / range);
        }
    }
}
