//! Multi-run drivers: the variant-by-strategy-by-seed ablation and the alpha
//! sweep. Each run gets its own directory and is resumed if already present.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::TestView;
use super::run::run_dfkd;
use crate::distill::Strategy;
use crate::error::Result;
use crate::synthesis::Variant;
use crate::tensor::Scalar;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.md";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub strategy: Strategy,
    pub seed: u64,
    pub final_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub final_acc: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn run_dir(root: &Path, variant: Variant, strategy: Strategy, seed: u64) -> PathBuf {
    root.join(format!("{}-{}-seed{seed}", variant.name(), strategy.name()))
}

/// Runs every `(variant, strategy, seed)` combination under `root` and writes
/// `ablation.csv` and `ablation.md`.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    variants: &[Variant],
    strategies: &[Strategy],
    seeds: &[u64],
    root: &Path,
    data: &TestView<T>,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(root)?;
    let mut rows = Vec::new();
    for &variant in variants {
        for &strategy in strategies {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.transfer.strategy = strategy;
                cfg.seed = seed;
                cfg.output_dir = run_dir(root, variant, strategy, seed);
                info!("ablation run {}", cfg.output_dir.display());
                let s = run_dfkd(&cfg, data)?;
                rows.push(AblationRow {
                    variant,
                    strategy,
                    seed,
                    final_acc: s.final_student_accuracy,
                });
            }
        }
    }
    write_rows(&root.join(ABLATION_CSV), &rows)?;
    fs::write(root.join(ABLATION_TABLE), ablation_table(&rows))?;
    Ok(rows)
}

/// Markdown table of final accuracy, mean and standard deviation over seeds.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut keys: Vec<(Variant, Strategy)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.variant, r.strategy)) {
            keys.push((r.variant, r.strategy));
        }
    }
    let mut s = String::from(
        "| variant | strategy | seeds | final acc mean | std |\n|---|---|---|---|---|\n",
    );
    for (v, st) in keys {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == v && r.strategy == st)
            .map(|r| r.final_acc)
            .collect();
        let (m, sd) = mean_std(&accs);
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {:.4} |",
            v.name(),
            st.name(),
            accs.len(),
            m,
            sd
        );
    }
    s
}

/// Runs the configured variant for each alpha and seed; writes `sweep.csv`.
pub fn run_alpha_sweep<T: Scalar>(
    base: &RunConfig,
    alphas: &[f64],
    seeds: &[u64],
    root: &Path,
    data: &TestView<T>,
) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(root)?;
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.weights.alpha = alpha;
            cfg.seed = seed;
            cfg.output_dir = root.join(format!("alpha{alpha}-seed{seed}"));
            info!("sweep run {}", cfg.output_dir.display());
            let s = run_dfkd(&cfg, data)?;
            rows.push(SweepRow {
                alpha,
                seed,
                final_acc: s.final_student_accuracy,
            });
        }
    }
    write_rows(&root.join(SWEEP_CSV), &rows)?;
    Ok(rows)
}

/// `(alpha, mean, std)` per distinct alpha, in input order.
pub fn sweep_points(rows: &[SweepRow]) -> Vec<(f64, f64, f64)> {
    let mut alphas: Vec<f64> = Vec::new();
    for r in rows {
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
    }
    alphas
        .into_iter()
        .map(|a| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.alpha == a)
                .map(|r| r.final_acc)
                .collect();
            let (m, s) = mean_std(&accs);
            (a, m, s)
        })
        .collect()
}

fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}
