//! `mdan prepare`: ingest raw data, window + normalize it, and write
//! per-subset artifacts plus a summary table.

use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, WriteBytesExt};
use sha2::{Digest, Sha256};

use mdan::data::{
    load_cmapss_with, load_mfd_with, make_synthetic_pair_with, CmapssOptions, CmapssSubset,
    DomainDataset, MfdCondition, MfdOptions,
};
use mdan::{Error, Result};

use crate::config::{DatasetKind, SyntheticSection, DATA_ROOT_ENV};
use crate::runner::write_json;

#[derive(Debug, clap::Args)]
pub struct PrepareArgs {
    /// Dataset family: cmapss, mfd, synthetic.
    #[arg(long)]
    pub dataset: String,
    /// Raw dataset root; falls back to MDAN_DATA_ROOT. Unused for synthetic.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generation seed (synthetic only).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also dump the full window tensors as binary files.
    #[arg(long)]
    pub emit_windows: bool,
}

/// Binary dump of one split: `[n][channels][window]` as u64 LE, then the
/// window tensors row-major, then the labels — all f64 LE.
fn write_windows_bin(path: &Path, windows: &[mdan::data::WindowedSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let (m, k) = windows.first().map(|s| s.x.dim()).unwrap_or((0, 0));
    let io = |e| Error::io(path, e);
    w.write_u64::<LittleEndian>(windows.len() as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(m as u64).map_err(io)?;
    w.write_u64::<LittleEndian>(k as u64).map_err(io)?;
    for s in windows {
        for &v in s.x.iter() {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    for s in windows {
        w.write_f64::<LittleEndian>(s.y).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Stable content hash over window tensors and labels of both splits.
fn dataset_hash(ds: &DomainDataset) -> String {
    let mut h = Sha256::new();
    for s in ds.train.iter().chain(ds.test.iter()) {
        for &v in s.x.iter() {
            h.update(v.to_le_bytes());
        }
        h.update(s.y.to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_domain_artifacts(
    out: &Path,
    name: &str,
    ds: &DomainDataset,
    emit_windows: bool,
) -> Result<String> {
    write_json(&out.join(format!("{name}_stats.json")), &ds.stats)?;
    let labels_path = out.join(format!("{name}_labels.csv"));
    let file = std::fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "split,index,y").map_err(|e| Error::io(&labels_path, e))?;
    for (split, windows) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in windows.iter().enumerate() {
            writeln!(w, "{split},{i},{}", s.y).map_err(|e| Error::io(&labels_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    if emit_windows {
        write_windows_bin(&out.join(format!("{name}_train.bin")), &ds.train)?;
        write_windows_bin(&out.join(format!("{name}_test.bin")), &ds.test)?;
    }
    Ok(dataset_hash(ds))
}

fn data_dir_or_env(args: &PrepareArgs) -> Result<PathBuf> {
    args.data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!(
                "prepare needs a data directory (--data-dir or {DATA_ROOT_ENV})"
            ))
        })
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let dataset: DatasetKind = args.dataset.parse()?;
    let mut summary = Vec::new();
    match dataset {
        DatasetKind::Cmapss => {
            let dir = data_dir_or_env(args)?;
            let opts = CmapssOptions::default();
            for subset in CmapssSubset::ALL {
                if !dir.join(format!("train_{subset}.txt")).exists() {
                    log::warn!("{subset}: train file not found under {}, skipped", dir.display());
                    continue;
                }
                let ds = load_cmapss_with(&dir, subset, &opts)?;
                let name = subset.to_string();
                let hash = write_domain_artifacts(&args.out, &name, &ds, args.emit_windows)?;
                summary.push(format!(
                    "{name},{},{},{},{},{},{},{hash}",
                    ds.train.len(),
                    ds.test.len(),
                    ds.skipped_units,
                    opts.window,
                    opts.step,
                    opts.rul_cap
                ));
            }
            finish(args, "subset,train_windows,test_windows,skipped_units,window,step,rul_cap,sha256", summary)
        }
        DatasetKind::Mfd => {
            let dir = data_dir_or_env(args)?;
            let opts = MfdOptions::default();
            for cond in ["a", "b", "c", "d"] {
                if !dir.join(cond).is_dir() {
                    log::warn!("condition {cond}: directory not found under {}, skipped", dir.display());
                    continue;
                }
                let condition: MfdCondition = cond.parse()?;
                let ds = load_mfd_with(&dir, condition, &opts)?;
                let hash = write_domain_artifacts(&args.out, cond, &ds, args.emit_windows)?;
                summary.push(format!(
                    "{cond},{},{},{},{},{hash}",
                    ds.train.len(),
                    ds.test.len(),
                    opts.window,
                    opts.shift
                ));
            }
            finish(args, "condition,train_windows,test_windows,window,shift,sha256", summary)
        }
        DatasetKind::Synthetic => {
            let section = SyntheticSection {
                seed: args.seed,
                ..SyntheticSection::default()
            };
            let (source, target) =
                make_synthetic_pair_with(section.seed, &section.shift(), &section.spec());
            for ds in [&source, &target] {
                let hash = write_domain_artifacts(&args.out, &ds.name, ds, args.emit_windows)?;
                summary.push(format!(
                    "{},{},{},{},{},{hash}",
                    ds.name,
                    ds.train.len(),
                    ds.test.len(),
                    section.window,
                    section.step
                ));
            }
            finish(args, "domain,train_windows,test_windows,window,step,sha256", summary)
        }
    }
}

fn finish(args: &PrepareArgs, header: &str, rows: Vec<String>) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty(format!(
            "prepare found no usable {} data",
            args.dataset
        )));
    }
    let path = args.out.join("summary.csv");
    let mut text = String::from(header);
    text.push('\n');
    println!("{header}");
    for row in &rows {
        text.push_str(row);
        text.push('\n');
        println!("{row}");
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
