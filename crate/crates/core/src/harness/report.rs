//! Figures and summaries rebuilt from run directories alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::ablation::{read_rows, sweep_points, SweepRow, SWEEP_CSV};
use super::config::{read_lock, CONFIG_LOCK};
use super::data::DatasetId;
use super::metrics::{read_metrics, METRICS_FILE};
use super::plots::{
    plot_accuracy_curves, plot_alpha_sweep, round_records, write_image_grid, write_rounds_montage,
    Curve,
};
use super::run::{BANK_DIR, PLOT_DIR};
use crate::bank::ImageBank;
use crate::distill::RoundMetrics;
use crate::error::{DfkdError, Result};

/// Run directories at or directly below `root`, sorted by path.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let is_run = |p: &Path| p.join(CONFIG_LOCK).is_file() && p.join(METRICS_FILE).is_file();
    if is_run(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_run(p))
        .collect();
    runs.sort();
    Ok(runs)
}

/// Seed-averaged metric rows keyed by round.
fn average(runs: &[Vec<RoundMetrics>]) -> Vec<RoundMetrics> {
    let mut by_round: BTreeMap<usize, Vec<&RoundMetrics>> = BTreeMap::new();
    for rows in runs {
        for r in rows {
            by_round.entry(r.round).or_default().push(r);
        }
    }
    by_round
        .into_iter()
        .map(|(round, rs)| {
            let n = rs.len() as f64;
            let avg = |f: fn(&RoundMetrics) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            RoundMetrics {
                round,
                l_ce: avg(|r| r.l_ce),
                l_kd: avg(|r| r.l_kd),
                l_fea: avg(|r| r.l_fea),
                l_csd: avg(|r| r.l_csd),
                student_acc: avg(|r| r.student_acc),
                aux_acc: avg(|r| r.aux_acc),
            }
        })
        .collect()
}

/// Writes per-round grids and a montage for one run into `<run>/plots/`.
fn regenerate_grids(run: &Path, dataset: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let bank_dir = run.join(BANK_DIR);
    if !bank_dir.join(crate::bank::INDEX_FILE).exists() {
        return Ok(());
    }
    let bank = ImageBank::open(&bank_dir)?;
    let Some(geo) = bank.geometry() else {
        return Ok(());
    };
    let norm = DatasetId::parse(dataset)?.normalization();
    let out = run.join(PLOT_DIR).join("grids");
    fs::create_dir_all(&out)?;
    for &round in bank.rounds_represented().keys() {
        let p = out.join(format!("round_{round:04}.png"));
        write_image_grid(&round_records(&bank, round, 25), geo, &norm, 5, &p)?;
        written.push(p);
    }
    let p = run.join(PLOT_DIR).join("grids_by_round.png");
    write_rounds_montage(&bank, &norm, 10, &p)?;
    written.push(p);
    Ok(())
}

/// Rebuilds every figure under `root`: accuracy curves per variant and
/// strategy (averaged over seeds), auxiliary accuracy, the alpha sweep when
/// `sweep.csv` exists, and image grids by round. Returns the written paths.
pub fn plot_from_artifacts(root: &Path, with_grids: bool) -> Result<Vec<PathBuf>> {
    let runs = find_runs(root)?;
    let sweep = root.join(SWEEP_CSV);
    if runs.is_empty() && !sweep.exists() {
        return Err(DfkdError::MissingMetrics(format!(
            "no run directories under {}",
            root.display()
        )));
    }
    let plots = root.join(PLOT_DIR);
    fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    let mut groups: BTreeMap<String, Vec<Vec<RoundMetrics>>> = BTreeMap::new();
    let mut sweep_groups = false;
    for run in &runs {
        let lock = read_lock(run)?;
        let c = &lock.config;
        let mut label = format!("{}/{}", c.variant.name(), c.transfer.strategy.name());
        if sweep.exists() {
            label = format!("{label} alpha={}", c.weights.alpha);
            sweep_groups = true;
        }
        groups
            .entry(label)
            .or_default()
            .push(read_metrics(&run.join(METRICS_FILE))?);
        if with_grids {
            regenerate_grids(run, &c.dataset, &mut written)?;
        }
    }
    if !groups.is_empty() {
        let curves: Vec<(String, Vec<RoundMetrics>)> = groups
            .iter()
            .map(|(name, rs)| {
                let label = if rs.len() > 1 {
                    format!("{name} (n={})", rs.len())
                } else {
                    name.clone()
                };
                (label, average(rs))
            })
            .collect();
        let prefix = if sweep_groups { "sweep_" } else { "" };
        let p = plots.join(format!("{prefix}accuracy.svg"));
        plot_accuracy_curves(&curves, Curve::Student, &p)?;
        written.push(p);
        let p = plots.join(format!("{prefix}aux_accuracy.svg"));
        plot_accuracy_curves(&curves, Curve::Aux, &p)?;
        written.push(p);
    }
    if sweep.exists() {
        let rows: Vec<SweepRow> = read_rows(&sweep)?;
        let p = plots.join("alpha_sweep.svg");
        plot_alpha_sweep(&sweep_points(&rows), &p)?;
        written.push(p);
    }
    Ok(written)
}

/// Bank contents summary.
#[derive(Clone, Debug, Serialize)]
pub struct BankReport {
    pub records: usize,
    pub geometry: Option<(usize, usize, usize)>,
    pub capacity: Option<usize>,
    pub class_histogram: Vec<usize>,
    pub rounds: BTreeMap<u32, usize>,
    pub content_hash: String,
}

pub fn inspect_bank(dir: &Path, classes: usize) -> Result<BankReport> {
    let bank = ImageBank::open(dir)?;
    Ok(BankReport {
        records: bank.len(),
        geometry: bank.geometry(),
        capacity: bank.capacity(),
        class_histogram: bank.histogram(classes),
        rounds: bank.rounds_represented(),
        content_hash: bank.content_hash(),
    })
}
