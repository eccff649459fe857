use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dfkd::distill::Strategy;
use dfkd::harness::{
    ablation::ABLATION_TABLE, inspect_bank, plot_from_artifacts, pretrain_teacher, run_ablation,
    run_alpha_sweep, run_dfkd, DatasetHandle, DatasetId, DatasetSpec, RunConfig,
};
use dfkd::synthesis::Variant;

#[derive(Parser)]
#[command(
    name = "dfkd",
    version,
    about = "Data-free knowledge distillation with a class-and-rotation auxiliary task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher on the labeled train split and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Run warm-up plus synthesis/transfer rounds for one configuration.
    Distill(RunArgs),
    /// Run every variant, strategy and seed combination.
    Ablate(AblateArgs),
    /// Run the configured variant for several alpha values.
    SweepAlpha(SweepArgs),
    /// Rebuild curves, grids and the sweep plot from a run or ablation directory.
    Plot(PlotArgs),
    /// Print a JSON summary of an image bank.
    InspectBank(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding dataset subdirectories (mnist/, fashion-mnist/, cifar-10-batches-bin/).
    #[arg(long, env = "DFKD_DATA_ROOT", default_value = "data")]
    data_root: PathBuf,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on the first N test images.
    #[arg(long)]
    max_test: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Teacher checkpoint to write; defaults to the config's teacher path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_train: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    warm_up_batches: Option<usize>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Generator optimization steps per round.
    #[arg(long)]
    synthesis_steps: Option<usize>,
    #[arg(long)]
    synthesis_batch: Option<usize>,
    /// Student optimization steps per round.
    #[arg(long)]
    transfer_steps: Option<usize>,
    #[arg(long)]
    transfer_batch: Option<usize>,
    #[arg(long)]
    bank_capacity: Option<usize>,
    /// Directory for reusable warm-up banks.
    #[arg(long)]
    warm_up_cache: Option<PathBuf>,
    #[arg(long)]
    no_grids: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "csd,adv,rotation,baseline"
    )]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_value = "separate")]
    strategies: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Parent directory of the individual runs.
    #[arg(long, default_value = "runs/ablation")]
    root: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,20")]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs/sweep")]
    root: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// A run directory or a directory of runs.
    root: PathBuf,
    /// Skip regenerating image grids from the bank.
    #[arg(long)]
    no_grids: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// A bank directory, or a run directory containing `bank/`.
    dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = &c.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
    }
    if c.max_test.is_some() {
        cfg.max_test = c.max_test;
    }
    Ok(cfg)
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.common)?;
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    set!(a.variant => variant);
    set!(a.strategy => transfer.strategy);
    set!(a.rounds => rounds);
    set!(a.warm_up_batches => warm_up_batches);
    set!(a.teacher => teacher_checkpoint);
    set!(a.output_dir => output_dir);
    set!(a.alpha => weights.alpha);
    set!(a.beta => weights.beta);
    set!(a.temperature => kd.temperature);
    set!(a.synthesis_steps => synthesis.steps);
    set!(a.synthesis_batch => synthesis.batch_size);
    set!(a.transfer_steps => transfer.steps);
    set!(a.transfer_batch => transfer.batch_size);
    if a.bank_capacity.is_some() {
        cfg.bank.capacity = a.bank_capacity;
    }
    if a.warm_up_cache.is_some() {
        cfg.warm_up_cache = a.warm_up_cache.clone();
    }
    if a.no_grids {
        cfg.save_grids = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, root: &Path, with_train: bool) -> Result<DatasetHandle<f32>> {
    let arch = cfg.effective_architecture();
    let spec = DatasetSpec {
        id: DatasetId::parse(&cfg.dataset)?,
        root: root.to_path_buf(),
        channels: arch.channels,
        height: arch.height,
        width: arch.width,
        max_train: cfg.pretrain.max_train,
        max_test: cfg.max_test,
    };
    DatasetHandle::load(&spec, with_train)
        .with_context(|| format!("loading {} from {}", cfg.dataset, root.display()))
}

fn main() -> Result<()> {
    dfkd::harness::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(v) = a.epochs {
                cfg.pretrain.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.pretrain.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.pretrain.lr = v;
            }
            if a.max_train.is_some() {
                cfg.pretrain.max_train = a.max_train;
            }
            let out = a.out.unwrap_or_else(|| cfg.teacher_checkpoint.clone());
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let data = load_data(&cfg, &a.common.data_root, true)?;
            let (_, s) =
                pretrain_teacher(&data, &cfg.effective_architecture(), &cfg.pretrain, &out)?;
            println!(
                "teacher test accuracy {:.4} -> {}",
                s.test_accuracy,
                out.display()
            );
        }
        Command::Distill(a) => {
            let cfg = run_config(&a)?;
            let data = load_data(&cfg, &a.common.data_root, false)?;
            let s = run_dfkd(&cfg, &data.test_view())?;
            println!(
                "teacher {:.4} student {:.4} ({} bank images) -> {}",
                s.teacher_accuracy,
                s.final_student_accuracy,
                s.bank_size,
                s.output_dir.display()
            );
        }
        Command::Ablate(a) => {
            let cfg = run_config(&a.run)?;
            let data = load_data(&cfg, &a.run.common.data_root, false)?;
            run_ablation(
                &cfg,
                &a.variants,
                &a.strategies,
                &a.seeds,
                &a.root,
                &data.test_view(),
            )?;
            print!("{}", std::fs::read_to_string(a.root.join(ABLATION_TABLE))?);
        }
        Command::SweepAlpha(a) => {
            let cfg = run_config(&a.run)?;
            let data = load_data(&cfg, &a.run.common.data_root, false)?;
            let rows = run_alpha_sweep(&cfg, &a.alphas, &a.seeds, &a.root, &data.test_view())?;
            for (alpha, m, s) in dfkd::harness::ablation::sweep_points(&rows) {
                println!("alpha {alpha}: {m:.4} +- {s:.4}");
            }
        }
        Command::Plot(a) => {
            for p in plot_from_artifacts(&a.root, !a.no_grids)? {
                println!("{}", p.display());
            }
        }
        Command::InspectBank(a) => {
            let dir = if a.dir.join("bank").is_dir() {
                a.dir.join("bank")
            } else {
                a.dir
            };
            let report = inspect_bank(&dir, a.classes)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
