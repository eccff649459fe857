//! Experiment harness: datasets, teacher pretraining, full runs, ablations
//! and figures.

pub mod ablation;
pub mod config;
pub mod data;
pub mod metrics;
pub mod plots;
pub mod pretrain;
pub mod report;
pub mod run;

pub use ablation::{run_ablation, run_alpha_sweep, AblationRow, SweepRow};
pub use config::{
    check_or_write_lock, read_lock, ConfigLock, PretrainConfig, RunConfig, CONFIG_LOCK,
};
pub use data::{DatasetHandle, DatasetId, DatasetSpec, Normalization, TestView};
pub use metrics::{read_metrics, write_metrics, METRICS_FILE, METRICS_HEADER};
pub use pretrain::{pretrain_teacher, PretrainSummary};
pub use report::{inspect_bank, plot_from_artifacts, BankReport};
pub use run::{run_dfkd, run_dfkd_until, RunSummary};

/// Keeps large buffers on the heap between steps. Every step allocates and
/// frees tens of megabytes of patch matrices, which glibc would otherwise
/// map and unmap each time, paying a page fault per page.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters; called before any
    // other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
