//! The knowledge-transfer stage and evaluation.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::bank::ImageBank;
use crate::error::{DfkdError, Result};
use crate::losses::{cross_entropy, loss_knowledge_transfer, KdConfig, LossWeights};
use crate::models::{AuxTask, Binding, BnMode, ModelBundle, StudentModel, TeacherModel, TinyCnn};
use crate::optim::{apply_to_module, collect_grads, cosine_lr, Optimizer, Sgd};
use crate::selfsup::{AugmentationPlan, RotationPolicy};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Student step on the transfer loss, then an auxiliary-head step with the
    /// student frozen.
    #[default]
    Separate,
    /// One step on the sum of both objectives for both parameter sets.
    Joint,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Separate => "separate",
            Strategy::Joint => "joint",
        }
    }
}

impl FromStr for Strategy {
    type Err = DfkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(Strategy::Separate),
            "joint" => Ok(Strategy::Joint),
            _ => Err(DfkdError::UnknownVariant {
                kind: "strategy",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// Optimizer steps per round.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub strategy: Strategy,
    /// Restart the cosine schedule every round instead of annealing over the run.
    pub restart_schedule_each_round: bool,
    /// Keep the auxiliary head across rounds instead of re-initializing.
    pub persistent_aux: bool,
    /// Rotation expansion of the auxiliary training batch.
    pub aux_rotation_policy: RotationPolicy,
    /// Bank images used to measure auxiliary accuracy after each round.
    pub aux_probe_size: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            strategy: Strategy::Separate,
            restart_schedule_each_round: false,
            persistent_aux: false,
            aux_rotation_policy: RotationPolicy::AllRotations,
            aux_probe_size: 256,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DfkdError::Config(
                "transfer steps must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(DfkdError::Config(
                "transfer batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One `metrics.csv` row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub l_ce: f64,
    pub l_kd: f64,
    pub l_fea: f64,
    pub l_csd: f64,
    pub student_acc: f64,
    pub aux_acc: f64,
}

/// Images with class labels, e.g. a test split.
#[derive(Clone, Debug)]
pub struct LabeledImages<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledImages<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let (n, ..) = images.dims4()?;
        if n != labels.len() {
            return Err(DfkdError::shape(format!(
                "{n} images, {} labels",
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Optimizer state carried across rounds.
#[derive(Clone, Debug)]
pub struct TransferState<T> {
    /// Student and projector parameters, in that slot order.
    pub student_opt: Sgd<T>,
    pub aux_opt: Sgd<T>,
    /// Transfer steps completed so far in the run.
    pub global_step: u64,
    /// Length of the whole-run cosine schedule.
    pub total_steps: u64,
}

impl<T: Scalar> TransferState<T> {
    pub fn new(cfg: &TransferConfig, total_steps: u64) -> Self {
        Self {
            student_opt: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            aux_opt: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            global_step: 0,
            total_steps,
        }
    }

    /// Drops auxiliary momentum, for when the head is re-initialized.
    pub fn reset_aux(&mut self, cfg: &TransferConfig) {
        self.aux_opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    }

    fn lr_at(&self, cfg: &TransferConfig, local_step: usize) -> f64 {
        if cfg.restart_schedule_each_round {
            cosine_lr(cfg.lr, local_step as u64, cfg.steps as u64)
        } else {
            cosine_lr(cfg.lr, self.global_step, self.total_steps.max(1))
        }
    }
}

/// Per-step values of one transfer stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferStep {
    pub lr: f64,
    pub ce: f64,
    pub kd: f64,
    pub fea: f64,
    pub csd: f64,
}

#[derive(Clone, Debug)]
pub struct TransferOutput {
    pub metrics: RoundMetrics,
    pub trace: Vec<TransferStep>,
}

fn aux_labels(plan: &AugmentationPlan, task: AuxTask) -> Vec<usize> {
    match task {
        AuxTask::Augmented => plan.k_labels(),
        AuxTask::Rotation => plan.rotation_labels(),
    }
}

fn check_finite(step: usize, s: &TransferStep) -> Result<()> {
    if [s.ce, s.kd, s.fea, s.csd].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DfkdError::NonFinite {
            stage: "transfer",
            step,
            detail: format!("ce={} kd={} fea={} csd={}", s.ce, s.kd, s.fea, s.csd),
        })
    }
}

/// Student sub-step: updates student and projector on the transfer loss.
/// Returns `(ce, kd, fea)`.
#[allow(clippy::too_many_arguments)]
pub fn student_update<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Sgd<T>,
    x: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    kd: &KdConfig,
    step: usize,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let sv = bundle.student.bind(&mut g, Binding::Trainable);
    let pv = bundle.projector.bind(&mut g, Binding::Trainable);
    let xv = g.constant(x.clone());
    let terms = loss_knowledge_transfer(&mut g, bundle, &sv, &pv, xv, labels, weights, kd)?;
    let vals = (
        g.scalar(terms.ce).as_f64(),
        g.scalar(terms.kd).as_f64(),
        g.scalar(terms.fea).as_f64(),
    );
    check_finite(
        step,
        &TransferStep {
            lr: opt.lr(),
            ce: vals.0,
            kd: vals.1,
            fea: vals.2,
            csd: 0.0,
        },
    )?;
    let mut grads = g.backward(terms.total)?;
    let gs = collect_grads(&g, &mut grads, &sv.vars());
    let gp = collect_grads(&g, &mut grads, &pv.vars());
    let moments = terms.student_moments;
    drop(g);
    opt.begin_step();
    let next = apply_to_module(opt, 0, &mut bundle.student, &gs)?;
    apply_to_module(opt, next, &mut bundle.projector, &gp)?;
    bundle.student.net_mut().commit_moments(&moments);
    Ok(vals)
}

/// Auxiliary sub-step: the student is frozen and runs with running
/// statistics; only the auxiliary head moves. Returns the loss.
pub fn aux_update<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Sgd<T>,
    x: &Tensor<T>,
    plan: &AugmentationPlan,
    step: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let sv = bundle.student.bind(&mut g, Binding::Frozen);
    let xv = g.constant(x.clone());
    let xr = plan.apply_var(&mut g, xv)?;
    let s = bundle.student.forward(&sv, &mut g, xr, BnMode::Eval)?;
    let av = bundle.aux.bind(&mut g, Binding::Trainable);
    let logits = bundle.aux.forward(&av, &mut g, s.features)?;
    let loss = cross_entropy(&mut g, logits, &aux_labels(plan, bundle.arch.aux_task))?;
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(DfkdError::NonFinite {
            stage: "transfer",
            step,
            detail: format!("auxiliary loss {value}"),
        });
    }
    let mut grads = g.backward(loss)?;
    let ga = collect_grads(&g, &mut grads, &av.vars());
    drop(g);
    opt.begin_step();
    apply_to_module(opt, 0, &mut bundle.aux, &ga)?;
    Ok(value)
}

/// Joint step: one objective `L_KT + L_aux` updates student, projector and
/// auxiliary head together. Returns the step values.
#[allow(clippy::too_many_arguments)]
pub fn joint_update<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    state: &mut TransferState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    plan: &AugmentationPlan,
    weights: &LossWeights,
    kd: &KdConfig,
    step: usize,
) -> Result<TransferStep> {
    let mut g = Graph::new();
    let sv = bundle.student.bind(&mut g, Binding::Trainable);
    let pv = bundle.projector.bind(&mut g, Binding::Trainable);
    let av = bundle.aux.bind(&mut g, Binding::Trainable);
    let xv = g.constant(x.clone());
    let terms = loss_knowledge_transfer(&mut g, bundle, &sv, &pv, xv, labels, weights, kd)?;
    let xr = plan.apply_var(&mut g, xv)?;
    let s = bundle.student.forward(&sv, &mut g, xr, BnMode::Train)?;
    let logits = bundle.aux.forward(&av, &mut g, s.features)?;
    let aux_loss = cross_entropy(&mut g, logits, &aux_labels(plan, bundle.arch.aux_task))?;
    let total = g.add(terms.total, aux_loss)?;
    let rec = TransferStep {
        lr: state.student_opt.lr(),
        ce: g.scalar(terms.ce).as_f64(),
        kd: g.scalar(terms.kd).as_f64(),
        fea: g.scalar(terms.fea).as_f64(),
        csd: g.scalar(aux_loss).as_f64(),
    };
    check_finite(step, &rec)?;
    let mut grads = g.backward(total)?;
    let gs = collect_grads(&g, &mut grads, &sv.vars());
    let gp = collect_grads(&g, &mut grads, &pv.vars());
    let ga = collect_grads(&g, &mut grads, &av.vars());
    let moments = terms.student_moments;
    drop(g);
    state.student_opt.begin_step();
    let next = apply_to_module(&mut state.student_opt, 0, &mut bundle.student, &gs)?;
    apply_to_module(&mut state.student_opt, next, &mut bundle.projector, &gp)?;
    state.aux_opt.begin_step();
    apply_to_module(&mut state.aux_opt, 0, &mut bundle.aux, &ga)?;
    bundle.student.net_mut().commit_moments(&moments);
    Ok(rec)
}

/// Shared loop of both strategies.
#[allow(clippy::too_many_arguments)]
fn transfer_loop<T: Scalar, R: Rng + ?Sized>(
    bundle: &mut ModelBundle<T>,
    bank: &ImageBank,
    cfg: &TransferConfig,
    strategy: Strategy,
    state: &mut TransferState<T>,
    weights: &LossWeights,
    kd: &KdConfig,
    round: usize,
    test: &LabeledImages<T>,
    rng: &mut R,
) -> Result<TransferOutput> {
    cfg.validate()?;
    if bank.is_empty() {
        return Err(DfkdError::EmptyBank);
    }
    let classes = bundle.arch.classes;
    let rotations = bundle.arch.rotations;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = state.lr_at(cfg, step);
        state.student_opt.set_lr(lr);
        state.aux_opt.set_lr(lr);
        let (x, labels) = bank.sample::<T, _>(cfg.batch_size, rng)?;
        let plan =
            AugmentationPlan::new(&labels, classes, rotations, cfg.aux_rotation_policy, rng)?;
        let rec = match strategy {
            Strategy::Separate => {
                let (ce, kd_v, fea) = student_update(
                    bundle,
                    &mut state.student_opt,
                    &x,
                    &labels,
                    weights,
                    kd,
                    step,
                )?;
                let csd = aux_update(bundle, &mut state.aux_opt, &x, &plan, step)?;
                TransferStep {
                    lr,
                    ce,
                    kd: kd_v,
                    fea,
                    csd,
                }
            }
            Strategy::Joint => joint_update(bundle, state, &x, &labels, &plan, weights, kd, step)?,
        };
        trace.push(rec);
        state.global_step += 1;
    }
    let n = trace.len().max(1) as f64;
    let mean = |f: fn(&TransferStep) -> f64| trace.iter().map(f).sum::<f64>() / n;
    let probe_n = cfg.aux_probe_size.min(bank.len()).max(1);
    let (probe, probe_labels) = bank.sample::<T, _>(probe_n, rng)?;
    let aux_acc = evaluate_aux(bundle, &probe, &probe_labels)?;
    let student_acc = evaluate(&bundle.student, test)?;
    Ok(TransferOutput {
        metrics: RoundMetrics {
            round,
            l_ce: mean(|s| s.ce),
            l_kd: mean(|s| s.kd),
            l_fea: mean(|s| s.fea),
            l_csd: mean(|s| s.csd),
            student_acc,
            aux_acc,
        },
        trace,
    })
}

/// Transfer stage with the separate strategy: each step updates the student
/// (and projector) first, then the auxiliary head with the student frozen.
#[allow(clippy::too_many_arguments)]
pub fn run_transfer_stage<T: Scalar, R: Rng + ?Sized>(
    bundle: &mut ModelBundle<T>,
    bank: &ImageBank,
    cfg: &TransferConfig,
    state: &mut TransferState<T>,
    weights: &LossWeights,
    kd: &KdConfig,
    round: usize,
    test: &LabeledImages<T>,
    rng: &mut R,
) -> Result<TransferOutput> {
    transfer_loop(
        bundle,
        bank,
        cfg,
        Strategy::Separate,
        state,
        weights,
        kd,
        round,
        test,
        rng,
    )
}

/// Transfer stage with the joint strategy.
#[allow(clippy::too_many_arguments)]
pub fn run_transfer_stage_joint<T: Scalar, R: Rng + ?Sized>(
    bundle: &mut ModelBundle<T>,
    bank: &ImageBank,
    cfg: &TransferConfig,
    state: &mut TransferState<T>,
    weights: &LossWeights,
    kd: &KdConfig,
    round: usize,
    test: &LabeledImages<T>,
    rng: &mut R,
) -> Result<TransferOutput> {
    transfer_loop(
        bundle,
        bank,
        cfg,
        Strategy::Joint,
        state,
        weights,
        kd,
        round,
        test,
        rng,
    )
}

/// Anything that maps an image batch to class logits in inference mode.
pub trait Classifier<T: Scalar> {
    fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Classifier<T> for TinyCnn<T> {
    fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        TinyCnn::predict_logits(self, images)
    }
}

impl<T: Scalar> Classifier<T> for TeacherModel<T> {
    fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.net().predict_logits(images)
    }
}

impl<T: Scalar> Classifier<T> for StudentModel<T> {
    fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.net().predict_logits(images)
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(DfkdError::EmptyDataset);
    }
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(DfkdError::shape(format!(
            "{} predictions, {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy on a labeled set.
pub fn evaluate<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    test: &LabeledImages<T>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(DfkdError::EmptyDataset);
    }
    accuracy(&model.predict_logits(&test.images)?, &test.labels)
}

/// Auxiliary-task accuracy on `probe` expanded with every rotation.
pub fn evaluate_aux<T: Scalar>(
    bundle: &ModelBundle<T>,
    probe: &Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    // All-rotation plans draw nothing from the generator.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let plan = AugmentationPlan::new(
        labels,
        bundle.arch.classes,
        bundle.arch.rotations,
        RotationPolicy::AllRotations,
        &mut rng,
    )?;
    let targets = aux_labels(&plan, bundle.arch.aux_task);
    let mut g = Graph::new();
    let sv = bundle.student.bind(&mut g, Binding::Frozen);
    let av = bundle.aux.bind(&mut g, Binding::Frozen);
    let xv = g.constant(probe.clone());
    let xr = plan.apply_var(&mut g, xv)?;
    let s = bundle.student.forward(&sv, &mut g, xr, BnMode::Eval)?;
    let logits = bundle.aux.forward(&av, &mut g, s.features)?;
    accuracy(g.value(logits), &targets)
}
