//! One distillation run: warm-up, then `rounds` of synthesis and transfer,
//! with every artifact written under the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use sha2::{Digest, Sha256};

use super::config::{check_or_write_lock, hex, RunConfig};
use super::data::TestView;
use super::metrics::{read_metrics, write_metrics, METRICS_FILE};
use super::plots::{round_records, write_image_grid};
use crate::bank::{warm_up, ImageBank};
use crate::distill::{
    evaluate, run_transfer_stage, run_transfer_stage_joint, RoundMetrics, Strategy, TransferState,
};
use crate::error::{DfkdError, Result};
use crate::models::{
    build_models, load_checkpoint_expecting, save_checkpoint, AuxClassifier, Checkpoint,
    CheckpointMetadata, Checkpointable, Generator, ModelBundle, Projector, TeacherModel,
};
use crate::rng::{Component, RngStreams};
use crate::synthesis::{run_synthesis_stage, select_ablation_objective, SynthesisRngs};
use crate::tensor::Scalar;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BANK_DIR: &str = "bank";
pub const GRID_DIR: &str = "grids";
pub const PLOT_DIR: &str = "plots";
pub const STATE_FILE: &str = "state.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
const STATE_KIND: &str = "run-state";
const GRID_IMAGES: usize = 25;

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
    pub teacher_accuracy: f64,
    pub final_student_accuracy: f64,
    pub bank_size: usize,
    /// Round the run resumed after, if it did.
    pub resumed_from: Option<usize>,
}

pub fn grid_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(GRID_DIR).join(format!("round_{round:04}.png"))
}

/// Fresh student, projector and auxiliary head, each from its own stream.
fn init_bundle<T: Scalar>(
    cfg: &RunConfig,
    streams: &RngStreams,
    teacher: TeacherModel<T>,
) -> Result<ModelBundle<T>> {
    let arch = cfg.effective_architecture();
    let mut bundle = build_models::<T, _>(&arch, &mut streams.stream(Component::StudentInit, 0))?;
    bundle.teacher = teacher;
    bundle.projector = Projector::new(
        arch.projector_spec()?,
        &mut streams.stream(Component::ProjectorInit, 0),
    );
    bundle.aux = AuxClassifier::new(arch.aux_spec()?, &mut streams.stream(Component::AuxInit, 0))?;
    bundle.generator = Generator::new(
        arch.generator_spec(),
        &mut streams.stream(Component::GeneratorInit, 0),
    )?;
    Ok(bundle)
}

fn load_teacher<T: Scalar>(cfg: &RunConfig) -> Result<TeacherModel<T>> {
    let arch = cfg.effective_architecture();
    let probe = build_models::<T, _>(
        &arch,
        &mut RngStreams::new(0).stream(Component::TeacherInit, 0),
    )?;
    let expected = probe.teacher.architecture();
    let (teacher, _) =
        load_checkpoint_expecting::<T, TeacherModel<T>>(&cfg.teacher_checkpoint, &expected)?;
    Ok(teacher)
}

/// Key of the warm-up cache: everything the warm-up bank depends on.
fn warm_up_key(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(&cfg.teacher_checkpoint)?);
    let parts = serde_json::json!({
        "arch": cfg.effective_architecture().generator_spec(),
        "classes": cfg.architecture.classes,
        "rotations": cfg.architecture.rotations,
        "synthesis": cfg.synthesis,
        "kd": cfg.kd,
        "batches": cfg.warm_up_batches,
        "seed": cfg.seed,
    });
    h.update(serde_json::to_vec(&parts)?);
    Ok(hex(&h.finalize()))
}

fn build_warm_bank<T: Scalar>(
    cfg: &RunConfig,
    bundle: &mut ModelBundle<T>,
    streams: &RngStreams,
) -> Result<ImageBank> {
    // A persistent generator carries warm-up state forward, so the bank alone
    // is not enough to reproduce the run.
    let cache = cfg
        .warm_up_cache
        .as_ref()
        .filter(|_| !cfg.synthesis.persistent_generator);
    let cached_dir = match cache {
        Some(root) => Some(root.join(warm_up_key(cfg)?)),
        None => None,
    };
    if let Some(dir) = &cached_dir {
        if dir.join(crate::bank::INDEX_FILE).exists() {
            let mut bank = ImageBank::open(dir)?;
            bank = rebind_capacity(bank, cfg);
            info!("warm-up bank loaded from cache {}", dir.display());
            return Ok(bank);
        }
    }
    let mut bank = ImageBank::new(&cfg.bank);
    let t = Instant::now();
    warm_up(
        &mut bank,
        bundle,
        &cfg.synthesis,
        &cfg.kd,
        cfg.warm_up_batches,
        streams,
    )?;
    info!(
        "warm-up: {} images in {:.1}s",
        bank.len(),
        t.elapsed().as_secs_f64()
    );
    if let Some(dir) = &cached_dir {
        bank.save(dir)?;
    }
    Ok(bank)
}

/// Applies the configured capacity to a bank loaded from elsewhere.
fn rebind_capacity(bank: ImageBank, cfg: &RunConfig) -> ImageBank {
    if bank.capacity() == cfg.bank.capacity {
        return bank;
    }
    let mut out = ImageBank::new(&cfg.bank);
    if let Some((c, h, w)) = bank.geometry() {
        for i in 0..bank.len() {
            let rec = bank.record(i).expect("index in range");
            let t = crate::tensor::Tensor::<f32>::new(vec![1, c, h, w], rec.to_vec())
                .expect("record shape");
            out.append(&t, &bank.labels()[i..=i], bank.rounds()[i])
                .expect("same geometry");
        }
    }
    out
}

fn save_state<T: Scalar>(
    path: &Path,
    cfg: &RunConfig,
    bundle: &ModelBundle<T>,
    state: &TransferState<T>,
    round: usize,
) -> Result<()> {
    let mut ck = Checkpoint::<T>::new(STATE_KIND, serde_json::to_value(&bundle.arch)?);
    ck.push_module("student.", &bundle.student);
    ck.push_module("projector.", &bundle.projector);
    ck.push_module("aux.", &bundle.aux);
    ck.push_module("generator.", &bundle.generator);
    for (i, t) in state.student_opt.state().into_iter().enumerate() {
        ck.push(format!("opt.student.{i}"), t);
    }
    for (i, t) in state.aux_opt.state().into_iter().enumerate() {
        ck.push(format!("opt.aux.{i}"), t);
    }
    ck.metadata = CheckpointMetadata {
        epoch: Some(round),
        seed: Some(cfg.seed),
        dataset: Some(cfg.dataset.clone()),
        test_accuracy: None,
        extra: [
            ("round".to_string(), serde_json::json!(round)),
            (
                "global_step".to_string(),
                serde_json::json!(state.global_step),
            ),
        ]
        .into_iter()
        .collect(),
    };
    ck.write(path)
}

fn load_state<T: Scalar>(
    path: &Path,
    bundle: &mut ModelBundle<T>,
    state: &mut TransferState<T>,
) -> Result<usize> {
    let ck = Checkpoint::<T>::read(path)?;
    let corrupt = |reason: &str| DfkdError::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if ck.kind != STATE_KIND {
        return Err(DfkdError::KindMismatch {
            path: path.to_path_buf(),
            expected: STATE_KIND.into(),
            found: ck.kind,
        });
    }
    if ck.architecture != serde_json::to_value(&bundle.arch)? {
        return Err(DfkdError::ArchitectureMismatch {
            path: path.to_path_buf(),
            expected: serde_json::to_string(&bundle.arch)?,
            found: ck.architecture.to_string(),
        });
    }
    ck.restore_module("student.", &mut bundle.student, path)?;
    ck.restore_module("projector.", &mut bundle.projector, path)?;
    ck.restore_module("aux.", &mut bundle.aux, path)?;
    ck.restore_module("generator.", &mut bundle.generator, path)?;
    let collect = |prefix: &str| -> Vec<_> {
        (0..)
            .map_while(|i| ck.get(&format!("{prefix}{i}")).cloned())
            .collect()
    };
    state.student_opt.load_state(collect("opt.student."));
    state.aux_opt.load_state(collect("opt.aux."));
    let extra = &ck.metadata.extra;
    let round = extra
        .get("round")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing round"))? as usize;
    state.global_step = extra
        .get("global_step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing global_step"))?;
    Ok(round)
}

fn write_grid(
    dir: &Path,
    bank: &ImageBank,
    round: usize,
    view: &TestView<impl Scalar>,
) -> Result<()> {
    let recs = round_records(bank, round as u32, GRID_IMAGES);
    if recs.is_empty() {
        return Ok(());
    }
    let geo = bank.geometry().ok_or(DfkdError::EmptyBank)?;
    write_image_grid(&recs, geo, &view.normalization, 5, &grid_path(dir, round))
}

/// Runs (or resumes) the full pipeline described by `cfg`. Only the test
/// split is reachable from here.
pub fn run_dfkd<T: Scalar>(cfg: &RunConfig, data: &TestView<T>) -> Result<RunSummary> {
    run_dfkd_until(cfg, data, None)
}

/// [`run_dfkd`] that stops once round `stop_after` is complete, leaving a
/// resumable run directory.
pub fn run_dfkd_until<T: Scalar>(
    cfg: &RunConfig,
    data: &TestView<T>,
    stop_after: Option<usize>,
) -> Result<RunSummary> {
    cfg.validate()?;
    if data.id.name() != super::data::DatasetId::parse(&cfg.dataset)?.name() {
        return Err(DfkdError::Config(format!(
            "config names dataset `{}` but `{}` was loaded",
            cfg.dataset,
            data.id.name()
        )));
    }
    let dir = cfg.output_dir.clone();
    check_or_write_lock(&dir, cfg)?;
    for sub in [CHECKPOINT_DIR, GRID_DIR, PLOT_DIR] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let test = data.test();
    let streams = RngStreams::new(cfg.seed);
    let teacher = load_teacher::<T>(cfg)?;
    let teacher_accuracy = evaluate(&teacher, test)?;
    info!("teacher test accuracy {teacher_accuracy:.4}");
    let mut bundle = init_bundle(cfg, &streams, teacher)?;
    let total_steps = (cfg.rounds * cfg.transfer.steps) as u64;
    let mut state = TransferState::<T>::new(&cfg.transfer, total_steps);
    let objective = select_ablation_objective(cfg.variant, cfg.weights.alpha);

    let state_path = dir.join(CHECKPOINT_DIR).join(STATE_FILE);
    let metrics_path = dir.join(METRICS_FILE);
    let bank_dir = dir.join(BANK_DIR);
    let (mut bank, mut metrics, start, resumed_from) = if state_path.exists() {
        let done = load_state(&state_path, &mut bundle, &mut state)?;
        let mut bank = ImageBank::open(&bank_dir)?;
        bank.truncate_after_round(done as u32);
        let mut metrics = read_metrics(&metrics_path)?;
        metrics.retain(|m| m.round <= done);
        info!("resuming after round {done}");
        (bank, metrics, done + 1, Some(done))
    } else {
        let bank = build_warm_bank(cfg, &mut bundle, &streams)?;
        if cfg.save_grids {
            write_grid(&dir, &bank, 0, data)?;
        }
        bank.save(&bank_dir)?;
        write_metrics(&metrics_path, &[])?;
        save_state(&state_path, cfg, &bundle, &state, 0)?;
        (bank, Vec::new(), 1, None)
    };

    let last = stop_after.map_or(cfg.rounds, |r| r.min(cfg.rounds));
    for round in start..=last {
        let t = Instant::now();
        let r = round as u64;
        if !cfg.synthesis.persistent_generator {
            bundle.generator = Generator::new(
                bundle.arch.generator_spec(),
                &mut streams.stream(Component::GeneratorInit, r),
            )?;
        }
        if !cfg.transfer.persistent_aux {
            bundle.aux = AuxClassifier::new(
                bundle.arch.aux_spec()?,
                &mut streams.stream(Component::AuxInit, r),
            )?;
            state.reset_aux(&cfg.transfer);
        }
        let out = run_synthesis_stage(
            &mut bundle,
            &cfg.synthesis,
            &objective,
            &cfg.kd,
            SynthesisRngs {
                noise: &mut streams.stream(Component::Noise, r),
                labels: &mut streams.stream(Component::Labels, r),
                rotation: &mut streams.stream(Component::Rotation, r),
            },
        )?;
        bank.append(&out.images, &out.labels, round as u32)?;
        if cfg.save_grids {
            write_grid(&dir, &bank, round, data)?;
        }
        let mut rng = streams.stream(Component::BankSample, r);
        let transfer = match cfg.transfer.strategy {
            Strategy::Separate => run_transfer_stage(
                &mut bundle,
                &bank,
                &cfg.transfer,
                &mut state,
                &cfg.weights,
                &cfg.kd,
                round,
                test,
                &mut rng,
            )?,
            Strategy::Joint => run_transfer_stage_joint(
                &mut bundle,
                &bank,
                &cfg.transfer,
                &mut state,
                &cfg.weights,
                &cfg.kd,
                round,
                test,
                &mut rng,
            )?,
        };
        let m = transfer.metrics;
        metrics.push(m);
        bank.save(&bank_dir)?;
        write_metrics(&metrics_path, &metrics)?;
        save_state(&state_path, cfg, &bundle, &state, round)?;
        info!(
            "round {round}/{}: acc {:.4} aux {:.4} ce {:.3} kd {:.3} fea {:.3} csd {:.3} ({:.1}s)",
            cfg.rounds,
            m.student_acc,
            m.aux_acc,
            m.l_ce,
            m.l_kd,
            m.l_fea,
            m.l_csd,
            t.elapsed().as_secs_f64()
        );
    }

    let final_student_accuracy = match metrics.last() {
        Some(m) => m.student_acc,
        None => evaluate(&bundle.student, test)?,
    };
    save_checkpoint(
        &bundle.student,
        &dir.join(CHECKPOINT_DIR).join(STUDENT_FILE),
        CheckpointMetadata {
            epoch: Some(cfg.rounds),
            seed: Some(cfg.seed),
            dataset: Some(cfg.dataset.clone()),
            test_accuracy: Some(final_student_accuracy),
            ..Default::default()
        },
    )?;
    Ok(RunSummary {
        output_dir: dir,
        metrics,
        teacher_accuracy,
        final_student_accuracy,
        bank_size: bank.len(),
        resumed_from,
    })
}
