//! Bearing fault-diagnosis ingestion: single-channel vibration signals under
//! four operating conditions (a-d) with three health classes.
//!
//! Assumed on-disk layout (documented, since no canonical text layout
//! exists): `data_dir/<condition>/` holds one or more signal files per class,
//! named `healthy*.csv`, `inner*.csv`, `outer*.csv` (or `.txt`), each with
//! one sample value per line. Windows are cut per file in chronological
//! order; the leading fraction of each file's windows goes to the training
//! split.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use super::{
    apply_minmax, fit_minmax, make_windows, DomainDataset, Task, WindowedSample,
};
use crate::error::{Error, Result};

/// Operating condition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MfdCondition {
    A,
    B,
    C,
    D,
}

impl fmt::Display for MfdCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MfdCondition::A => "a",
            MfdCondition::B => "b",
            MfdCondition::C => "c",
            MfdCondition::D => "d",
        })
    }
}

impl FromStr for MfdCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(MfdCondition::A),
            "b" => Ok(MfdCondition::B),
            "c" => Ok(MfdCondition::C),
            "d" => Ok(MfdCondition::D),
            other => Err(Error::Config(format!("unknown condition tag: {other}"))),
        }
    }
}

/// Windowing options; defaults are window 5120 with shift 4096.
#[derive(Debug, Clone)]
pub struct MfdOptions {
    pub window: usize,
    pub shift: usize,
    pub train_fraction: f64,
}

impl Default for MfdOptions {
    fn default() -> Self {
        Self {
            window: 5120,
            shift: 4096,
            train_fraction: 0.8,
        }
    }
}

pub const MFD_CLASSES: [(&str, usize); 3] = [("healthy", 0), ("inner", 1), ("outer", 2)];

pub fn load_mfd(data_dir: &Path, condition: MfdCondition) -> Result<DomainDataset> {
    load_mfd_with(data_dir, condition, &MfdOptions::default())
}

pub fn load_mfd_with(
    data_dir: &Path,
    condition: MfdCondition,
    opts: &MfdOptions,
) -> Result<DomainDataset> {
    let cond_dir = data_dir.join(condition.to_string());
    if !cond_dir.is_dir() {
        return Err(Error::io(
            &cond_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "condition directory missing"),
        ));
    }

    let mut entries: Vec<_> = std::fs::read_dir(&cond_dir)
        .map_err(|e| Error::io(&cond_dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(&cond_dir, e))?;
    entries.sort_by_key(|e| e.file_name());

    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in entries {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_lowercase();
        let Some(&(_, class)) = MFD_CLASSES.iter().find(|(p, _)| name.starts_with(p)) else {
            continue;
        };
        let signal = read_signal(&path)?;
        let series = Array2::from_shape_vec((signal.len(), 1), signal)
            .expect("column vector shape");
        let windows = make_windows(&series, opts.window, opts.shift);
        let n_train = ((windows.len() as f64) * opts.train_fraction).round() as usize;
        for (i, x) in windows.into_iter().enumerate() {
            let sample = WindowedSample {
                x,
                y: class as f64,
                is_pseudo: false,
            };
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
    }
    if train.is_empty() {
        return Err(Error::Empty(format!(
            "no usable signal files under {}",
            cond_dir.display()
        )));
    }

    let stats = fit_minmax(train.iter())?;
    for w in train.iter_mut().chain(test.iter_mut()) {
        apply_minmax(&mut w.x, &stats);
    }

    Ok(DomainDataset {
        name: format!("mfd-{condition}"),
        task: Task::Classification { num_classes: 3 },
        train,
        test,
        stats,
        skipped_units: 0,
    })
}

fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<f64>().map_err(|_| {
            Error::parse(path, format!("line {}: bad sample {t:?}", lineno + 1))
        })?);
    }
    Ok(out)
}
