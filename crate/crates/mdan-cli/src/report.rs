//! `mdan report`: turn finished run directories into per-epoch curve plots
//! (SVG plus the underlying CSV) and a KL probe table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mdan::evaluation::KLProbeResult;
use mdan::{Error, Result};

use crate::plot::{line_svg, Series};

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Finished run directories (each a `train` --out or a sweep cell).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory for plots and tables.
    #[arg(long)]
    pub out: PathBuf,
}

/// Columns averaged per epoch for the loss plot, keyed by header name.
const LOSS_COLUMNS: [&str; 8] = [
    "l_s_or", "l_s_mx", "l_m", "l_um", "l_r", "l_cd", "l_t_or", "l_t_mx",
];
/// Columns averaged per epoch for the mixup/scheduler plot.
const MIXUP_COLUMNS: [&str; 6] = ["lambda", "lambda_tilde", "q", "d_s_mix", "d_t_mix", "kept_fraction"];

/// Per-epoch means of optional-valued columns; cells empty in every
/// iteration of an epoch stay absent.
struct EpochTable {
    epochs: Vec<usize>,
    /// column name -> per-epoch mean (aligned with `epochs`).
    columns: BTreeMap<String, Vec<Option<f64>>>,
}

fn read_history(path: &Path, wanted: &[&str]) -> Result<EpochTable> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let epoch_idx = headers
        .iter()
        .position(|h| h == "epoch")
        .ok_or_else(|| Error::parse(path, "missing epoch column"))?;
    let col_idx: Vec<(String, usize)> = wanted
        .iter()
        .filter_map(|w| headers.iter().position(|h| h == *w).map(|i| (w.to_string(), i)))
        .collect();

    // epoch -> (per-column sum, count)
    let mut acc: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let epoch: usize = record
            .get(epoch_idx)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, "bad epoch cell"))?;
        let row = acc.entry(epoch).or_insert_with(|| vec![(0.0, 0); col_idx.len()]);
        for (j, (_, i)) in col_idx.iter().enumerate() {
            if let Some(cell) = record.get(*i) {
                if !cell.is_empty() {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| Error::parse(path, format!("bad float {cell:?}")))?;
                    row[j].0 += v;
                    row[j].1 += 1;
                }
            }
        }
    }

    let epochs: Vec<usize> = acc.keys().copied().collect();
    let mut columns: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for (j, (name, _)) in col_idx.iter().enumerate() {
        let series = acc
            .values()
            .map(|row| {
                let (sum, n) = row[j];
                (n > 0).then(|| sum / n as f64)
            })
            .collect();
        columns.insert(name.clone(), series);
    }
    Ok(EpochTable { epochs, columns })
}

fn write_epoch_csv(path: &Path, table: &EpochTable, order: &[&str]) -> Result<()> {
    let present: Vec<&str> = order
        .iter()
        .copied()
        .filter(|c| table.columns.contains_key(*c))
        .collect();
    let mut out = String::from("epoch");
    for c in &present {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (row, epoch) in table.epochs.iter().enumerate() {
        out.push_str(&epoch.to_string());
        for c in &present {
            out.push(',');
            if let Some(v) = table.columns[*c][row] {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn to_series(table: &EpochTable, order: &[&str]) -> Vec<Series> {
    order
        .iter()
        .filter_map(|name| {
            let col = table.columns.get(*name)?;
            let points: Vec<(f64, f64)> = table
                .epochs
                .iter()
                .zip(col)
                .filter_map(|(e, v)| v.map(|v| (*e as f64, v)))
                .collect();
            (!points.is_empty()).then(|| Series {
                name: name.to_string(),
                points,
            })
        })
        .collect()
}

/// history.csv files under `dir`, at most three levels deep, sorted.
fn find_histories(dir: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) {
        let direct = dir.join("history.csv");
        if direct.is_file() {
            out.push(direct);
        }
        if depth == 0 {
            return;
        }
        let Ok(entries) = std::fs::read_dir(dir) else {
            return;
        };
        let mut subdirs: Vec<PathBuf> = entries
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            walk(&sub, depth - 1, out);
        }
    }
    let mut out = Vec::new();
    walk(dir, 3, &mut out);
    out.sort();
    out
}

fn find_kl_files(dir: &Path) -> Vec<PathBuf> {
    find_histories(dir)
        .into_iter()
        .map(|h| h.with_file_name("kl.json"))
        .filter(|p| p.is_file())
        .collect()
}

fn run_label(root: &Path, history: &Path) -> String {
    let rel = history
        .parent()
        .and_then(|p| p.strip_prefix(root.parent().unwrap_or(root)).ok())
        .unwrap_or(history);
    rel.to_string_lossy().replace(['/', '\\'], "_")
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut kl_rows: Vec<(String, KLProbeResult)> = Vec::new();
    let mut plotted = 0usize;

    for run in &args.runs {
        let histories = find_histories(run);
        if histories.is_empty() {
            log::warn!("{}: no history.csv found, skipped", run.display());
            continue;
        }
        for history in &histories {
            let label = run_label(run, history);
            let losses = read_history(history, &LOSS_COLUMNS)?;
            write_epoch_csv(
                &args.out.join(format!("{label}_loss_vs_epoch.csv")),
                &losses,
                &LOSS_COLUMNS,
            )?;
            line_svg(
                &args.out.join(format!("{label}_loss_vs_epoch.svg")),
                &format!("{label}: losses per epoch"),
                "epoch",
                &to_series(&losses, &LOSS_COLUMNS),
            )?;

            let mixup = read_history(history, &MIXUP_COLUMNS)?;
            write_epoch_csv(
                &args.out.join(format!("{label}_mixup_vs_epoch.csv")),
                &mixup,
                &MIXUP_COLUMNS,
            )?;
            line_svg(
                &args.out.join(format!("{label}_mixup_vs_epoch.svg")),
                &format!("{label}: mixup schedule per epoch"),
                "epoch",
                &to_series(&mixup, &MIXUP_COLUMNS),
            )?;
            plotted += 1;
        }
        for kl_path in find_kl_files(run) {
            let text =
                std::fs::read_to_string(&kl_path).map_err(|e| Error::io(&kl_path, e))?;
            let kl: KLProbeResult = serde_json::from_str(&text)
                .map_err(|e| Error::parse(&kl_path, e.to_string()))?;
            kl_rows.push((run_label(run, &kl_path), kl));
        }
    }

    if plotted == 0 {
        return Err(Error::Empty("no run directory contained a history.csv".into()));
    }
    let mut kl_csv = String::from("run,scenario,kl_before,kl_after\n");
    for (label, kl) in &kl_rows {
        kl_csv.push_str(&format!("{label},{},{},{}\n", kl.scenario, kl.before, kl.after));
    }
    let kl_path = args.out.join("kl_table.csv");
    std::fs::write(&kl_path, kl_csv).map_err(|e| Error::io(&kl_path, e))?;

    // Markdown digest pointing at the emitted artifacts.
    let mut md = String::from("# Run report\n\n## KL probe (source vs target embeddings)\n\n");
    md.push_str("| run | scenario | before | after |\n|---|---|---|---|\n");
    for (label, kl) in &kl_rows {
        md.push_str(&format!(
            "| {label} | {} | {:.6} | {:.6} |\n",
            kl.scenario, kl.before, kl.after
        ));
    }
    md.push_str(&format!(
        "\n{plotted} run(s) plotted; per-run `*_loss_vs_epoch` and `*_mixup_vs_epoch` \
         curves are emitted as SVG images with CSV twins alongside this file.\n"
    ));
    let md_path = args.out.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    println!(
        "report: {plotted} run(s) plotted, {} KL probe(s); output in {}",
        kl_rows.len(),
        args.out.display()
    );
    Ok(())
}
