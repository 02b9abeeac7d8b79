//! Turbofan run-to-failure ingestion in the NASA 26-column text format
//! (unit, cycle, 3 operational settings, 21 sensors), plus a deterministic
//! fixture generator that emits files in the same format for self-contained
//! tests and desk-scale experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use super::{
    apply_minmax, fit_minmax, make_windows, piecewise_rul, select_sensors, DomainDataset,
    RunRecord, Task, WindowedSample, CMAPSS_RAW_SENSORS,
};
use crate::error::{Error, Result};

/// The four turbofan subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmapssSubset {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl CmapssSubset {
    pub const ALL: [CmapssSubset; 4] = [
        CmapssSubset::FD001,
        CmapssSubset::FD002,
        CmapssSubset::FD003,
        CmapssSubset::FD004,
    ];
}

impl fmt::Display for CmapssSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmapssSubset::FD001 => "FD001",
            CmapssSubset::FD002 => "FD002",
            CmapssSubset::FD003 => "FD003",
            CmapssSubset::FD004 => "FD004",
        };
        f.write_str(s)
    }
}

impl FromStr for CmapssSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FD001" => Ok(CmapssSubset::FD001),
            "FD002" => Ok(CmapssSubset::FD002),
            "FD003" => Ok(CmapssSubset::FD003),
            "FD004" => Ok(CmapssSubset::FD004),
            other => Err(Error::Config(format!("unknown C-MAPSS subset: {other}"))),
        }
    }
}

/// Windowing and labeling options for the loader.
#[derive(Debug, Clone)]
pub struct CmapssOptions {
    pub window: usize,
    pub step: usize,
    pub rul_cap: f64,
}

impl Default for CmapssOptions {
    fn default() -> Self {
        Self {
            window: 30,
            step: 1,
            rul_cap: 125.0,
        }
    }
}

/// Published per-subset counts: (training windows, test units) at the
/// default window of 30 / step of 1.
pub fn cmapss_table_counts(subset: CmapssSubset) -> (usize, usize) {
    match subset {
        CmapssSubset::FD001 => (17731, 100),
        CmapssSubset::FD002 => (48558, 259),
        CmapssSubset::FD003 => (21220, 100),
        CmapssSubset::FD004 => (56815, 248),
    }
}

fn train_units(subset: CmapssSubset) -> usize {
    match subset {
        CmapssSubset::FD001 => 100,
        CmapssSubset::FD002 => 260,
        CmapssSubset::FD003 => 100,
        CmapssSubset::FD004 => 249,
    }
}

/// Load one subset with default windowing (window 30, step 1, cap 125).
pub fn load_cmapss(data_dir: &Path, subset: CmapssSubset) -> Result<DomainDataset> {
    load_cmapss_with(data_dir, subset, &CmapssOptions::default())
}

/// Load one subset: parse, select the 14 informative sensors, window the
/// training units with capped linear-decay labels, fit min-max on the
/// training windows and normalize both splits. The test split holds exactly
/// one terminal window per unit, labeled from the RUL file.
pub fn load_cmapss_with(
    data_dir: &Path,
    subset: CmapssSubset,
    opts: &CmapssOptions,
) -> Result<DomainDataset> {
    let train_path = data_dir.join(format!("train_{subset}.txt"));
    let test_path = data_dir.join(format!("test_{subset}.txt"));
    let rul_path = data_dir.join(format!("RUL_{subset}.txt"));

    let train_records = select_sensors(&parse_cmapss_file(&train_path)?)?;
    let test_records = select_sensors(&parse_cmapss_file(&test_path)?)?;
    let rul_values = parse_rul_file(&rul_path)?;

    let mut skipped = 0usize;

    // Training windows: per-unit sliding windows, RUL = cycles to failure at
    // the window's last cycle, capped.
    let mut train: Vec<WindowedSample> = Vec::new();
    for (_, series) in group_units(&train_records) {
        let len = series.nrows();
        if len < opts.window {
            skipped += 1;
            continue;
        }
        for (i, x) in make_windows(&series, opts.window, opts.step).into_iter().enumerate() {
            let window_end = i * opts.step + opts.window; // 1-based cycle index
            let rul = (len - window_end) as f64;
            train.push(WindowedSample {
                x,
                y: piecewise_rul(rul, opts.rul_cap),
                is_pseudo: false,
            });
        }
    }
    if train.is_empty() {
        return Err(Error::Empty(format!("no training windows for {subset}")));
    }

    // Test windows: the final `window` cycles of each unit.
    let test_units: Vec<(u32, Array2<f64>)> = group_units(&test_records).into_iter().collect();
    if rul_values.len() != test_units.len() {
        return Err(Error::parse(
            &rul_path,
            format!(
                "RUL file has {} entries but test split has {} units",
                rul_values.len(),
                test_units.len()
            ),
        ));
    }
    let mut test: Vec<WindowedSample> = Vec::new();
    for ((_, series), &rul) in test_units.iter().zip(&rul_values) {
        let len = series.nrows();
        if len < opts.window {
            skipped += 1;
            log::warn!("{subset}: test unit shorter than window ({len} cycles), skipped");
            continue;
        }
        let tail = series.slice(ndarray::s![len - opts.window.., ..]).t().to_owned();
        test.push(WindowedSample {
            x: tail,
            y: piecewise_rul(rul, opts.rul_cap),
            is_pseudo: false,
        });
    }
    if skipped > 0 {
        log::warn!("{subset}: {skipped} unit(s) shorter than the window were skipped");
    }

    let stats = fit_minmax(train.iter())?;
    for w in train.iter_mut().chain(test.iter_mut()) {
        apply_minmax(&mut w.x, &stats);
    }

    Ok(DomainDataset {
        name: subset.to_string(),
        task: Task::Regression,
        train,
        test,
        stats,
        skipped_units: skipped,
    })
}

fn parse_cmapss_file(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(path, format!("line {}: bad number {t:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 5 + CMAPSS_RAW_SENSORS {
            return Err(Error::parse(
                path,
                format!(
                    "line {}: expected {} columns, got {}",
                    lineno + 1,
                    5 + CMAPSS_RAW_SENSORS,
                    fields.len()
                ),
            ));
        }
        records.push(RunRecord {
            unit_id: fields[0] as u32,
            cycle: fields[1] as u32,
            op_settings: [fields[2], fields[3], fields[4]],
            sensors: fields[5..].to_vec(),
        });
    }
    Ok(records)
}

fn parse_rul_file(path: &Path) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<f64>().map_err(|_| {
            Error::parse(path, format!("line {}: bad RUL value {t:?}", lineno + 1))
        })?);
    }
    Ok(out)
}

/// Group records into per-unit series (time steps x sensors), ordered by
/// unit id then cycle.
fn group_units(records: &[RunRecord]) -> Vec<(u32, Array2<f64>)> {
    let mut units: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        units.entry(r.unit_id).or_default().push(r);
    }
    units
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by_key(|r| r.cycle);
            let m = rows[0].sensors.len();
            let mut series = Array2::zeros((rows.len(), m));
            for (t, r) in rows.iter().enumerate() {
                for (j, &v) in r.sensors.iter().enumerate() {
                    series[(t, j)] = v;
                }
            }
            (id, series)
        })
        .collect()
}

/// Serialize records in the 26-column layout, so the loader round-trips
/// synthetic fixtures exactly like the real files.
pub fn write_cmapss_format(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        write!(f, "{} {}", r.unit_id, r.cycle).map_err(|e| Error::io(path, e))?;
        for s in r.op_settings.iter().chain(r.sensors.iter()) {
            write!(f, " {s:.4}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(f).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fixture generation
// ---------------------------------------------------------------------------

/// Per-subset signal-generation profile. Subsets deliberately differ in
/// degradation curvature, channel gains and noise so cross-subset transfer
/// exhibits a genuine covariate shift.
struct SubsetProfile {
    exponent: f64,
    noise: f64,
    gain: f64,
    offset: f64,
    regime_amp: f64,
}

fn subset_profile(subset: CmapssSubset) -> SubsetProfile {
    match subset {
        CmapssSubset::FD001 => SubsetProfile {
            exponent: 1.0,
            noise: 0.02,
            gain: 1.0,
            offset: 0.0,
            regime_amp: 0.0,
        },
        CmapssSubset::FD002 => SubsetProfile {
            exponent: 1.5,
            noise: 0.06,
            gain: 1.4,
            offset: 5.0,
            regime_amp: 0.5,
        },
        CmapssSubset::FD003 => SubsetProfile {
            exponent: 2.0,
            noise: 0.05,
            gain: 0.8,
            offset: -3.0,
            regime_amp: 0.0,
        },
        CmapssSubset::FD004 => SubsetProfile {
            exponent: 2.5,
            noise: 0.08,
            gain: 1.2,
            offset: 4.0,
            regime_amp: 0.5,
        },
    }
}

/// Split `total` cycles into `n` unit lengths, all >= `min_len`, exactly.
fn partition_lengths(total: usize, n: usize, min_len: usize, spread: usize) -> Vec<usize> {
    assert!(total >= n * min_len, "total cycles too small for unit count");
    let mut lens: Vec<usize> = (0..n)
        .map(|i| min_len + (i.wrapping_mul(2654435761) % spread.max(1)))
        .collect();
    let mut sum: usize = lens.iter().sum();
    let mut i = 0;
    while sum != total {
        if sum < total {
            lens[i % n] += 1;
            sum += 1;
        } else if lens[i % n] > min_len {
            lens[i % n] -= 1;
            sum -= 1;
        }
        i += 1;
    }
    lens
}

/// Deterministic unit-interval noise from integer coordinates, in [-1, 1].
fn hash_noise(a: u64, b: u64, c: u64) -> f64 {
    let mut z = a
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(c.wrapping_mul(0x94d049bb133111eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    (z as f64 / u64::MAX as f64) * 2.0 - 1.0
}

fn sensor_rows(
    unit: u32,
    observed: usize,
    full_life: usize,
    p: &SubsetProfile,
    salt: u64,
) -> Vec<RunRecord> {
    (0..observed)
        .map(|t| {
            let h = t as f64 / (full_life - 1).max(1) as f64;
            let degr = h.powf(p.exponent);
            let regime = p.regime_amp * (0.3 * t as f64).sin();
            let sensors: Vec<f64> = (0..CMAPSS_RAW_SENSORS)
                .map(|j| {
                    let informative = super::CMAPSS_SELECTED_SENSORS.contains(&j);
                    let base = 100.0 + 10.0 * j as f64 + p.offset;
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    let gain = if informative {
                        p.gain * sign * (1.0 + (j % 5) as f64 * 0.3)
                    } else {
                        0.0
                    };
                    let eps = p.noise * hash_noise(salt ^ unit as u64, t as u64, j as u64);
                    base + gain * degr + regime * if informative { 1.0 } else { 0.0 } + eps
                })
                .collect();
            RunRecord {
                unit_id: unit,
                cycle: (t + 1) as u32,
                op_settings: [regime, 0.0, 0.0],
                sensors,
            }
        })
        .collect()
}

/// Write a complete synthetic subset (train, test and RUL files) into `dir`.
///
/// Unit counts and total training cycles are chosen so that windowing with
/// the default window of 30 / step of 1 reproduces the published per-subset
/// sample counts exactly. Signals follow a noisy monotone degradation trend
/// whose shape differs per subset.
pub fn write_cmapss_fixture(dir: &Path, subset: CmapssSubset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train_windows, test_units) = cmapss_table_counts(subset);
    let n_train = train_units(subset);
    let total_cycles = train_windows + n_train * 29;
    let profile = subset_profile(subset);
    let salt = match subset {
        CmapssSubset::FD001 => 11,
        CmapssSubset::FD002 => 22,
        CmapssSubset::FD003 => 33,
        CmapssSubset::FD004 => 44,
    };

    let lens = partition_lengths(total_cycles, n_train, 140, 120);
    let mut train_records = Vec::new();
    for (i, &len) in lens.iter().enumerate() {
        train_records.extend(sensor_rows(i as u32 + 1, len, len, &profile, salt));
    }
    write_cmapss_format(&dir.join(format!("train_{subset}.txt")), &train_records)?;

    let mut test_records = Vec::new();
    let mut ruls = Vec::new();
    for i in 0..test_units {
        let rul = 10 + (i * 29) % 130;
        let observed = 60 + (i * 53) % 120;
        let full_life = observed + rul;
        test_records.extend(sensor_rows(
            i as u32 + 1,
            observed,
            full_life,
            &profile,
            salt ^ 0xdead,
        ));
        ruls.push(rul);
    }
    write_cmapss_format(&dir.join(format!("test_{subset}.txt")), &test_records)?;

    let rul_path = dir.join(format!("RUL_{subset}.txt"));
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&rul_path).map_err(|e| Error::io(&rul_path, e))?,
    );
    for r in &ruls {
        writeln!(f, "{r}").map_err(|e| Error::io(&rul_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_roundtrips_with_published_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_cmapss_fixture(dir.path(), CmapssSubset::FD001).unwrap();
        let ds = load_cmapss(dir.path(), CmapssSubset::FD001).unwrap();
        assert_eq!(ds.train.len(), 17731);
        assert_eq!(ds.test.len(), 100);
        assert_eq!(ds.shape(), Some((14, 30)));
        // labels capped
        assert!(ds.train.iter().all(|w| w.y >= 0.0 && w.y <= 125.0));
        // training windows normalized into [0,1]
        assert!(ds
            .train
            .iter()
            .all(|w| w.x.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn missing_file_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_cmapss(dir.path(), CmapssSubset::FD001).is_err());
    }

    #[test]
    fn reload_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        write_cmapss_fixture(dir.path(), CmapssSubset::FD003).unwrap();
        let a = load_cmapss(dir.path(), CmapssSubset::FD003).unwrap();
        let b = load_cmapss(dir.path(), CmapssSubset::FD003).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        assert_eq!(a.stats, b.stats);
        for (wa, wb) in a.train.iter().zip(&b.train) {
            assert_eq!(wa.x, wb.x);
            assert_eq!(wa.y, wb.y);
        }
    }

    #[test]
    fn short_units_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        // one good unit of 40 cycles, one unit of 10 cycles
        let mut records = Vec::new();
        let p = subset_profile(CmapssSubset::FD001);
        records.extend(sensor_rows(1, 40, 40, &p, 1));
        records.extend(sensor_rows(2, 10, 10, &p, 1));
        write_cmapss_format(&dir.path().join("train_FD001.txt"), &records).unwrap();
        write_cmapss_format(
            &dir.path().join("test_FD001.txt"),
            &sensor_rows(1, 35, 60, &p, 2),
        )
        .unwrap();
        std::fs::write(dir.path().join("RUL_FD001.txt"), "25\n").unwrap();
        let ds = load_cmapss(dir.path(), CmapssSubset::FD001).unwrap();
        assert_eq!(ds.train.len(), 11); // only the 40-cycle unit: 40-30+1
        assert_eq!(ds.skipped_units, 1);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.test[0].y, 25.0);
    }
}
