//! Scalar objectives as graph operations. Every loss is a batch mean.

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchMoments, ChannelStats, Graph, Var};
use crate::error::{DfkdError, Result};
use crate::models::{AuxTask, AuxVars};
use crate::models::{BnMode, CnnVars, GeneratorVars, ModelBundle, ProjectorVars};
use crate::selfsup::AugmentationPlan;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 20.0;
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 30.0;

/// Softening of the distillation KL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdConfig {
    pub temperature: f64,
    /// Multiply the KL by `tau^2`.
    pub scale_by_tau_sq: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            scale_by_tau_sq: true,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DfkdError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(DfkdError::Config(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    g.nll(lp, labels)
}

/// Cross entropy of the teacher's prediction against the intended labels.
pub fn loss_cls<T: Scalar>(g: &mut Graph<T>, teacher_logits: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy(g, teacher_logits, labels)
}

/// `sum_l ||mu~_l - mu_l||_2 + ||var~_l - var_l||_2`.
pub fn loss_bns<T: Scalar>(
    g: &mut Graph<T>,
    batch_stats: &[ChannelStats],
    running: &[(&Tensor<T>, &Tensor<T>)],
) -> Result<Var> {
    if batch_stats.len() != running.len() {
        return Err(DfkdError::shape(format!(
            "{} captured BN layers vs {} running-stat layers",
            batch_stats.len(),
            running.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (l, (s, (mu, var))) in batch_stats.iter().zip(running).enumerate() {
        for (batch, reference) in [(s.mean, *mu), (s.var, *var)] {
            if g.value(batch).numel() != reference.numel() {
                return Err(DfkdError::shape(format!(
                    "BN layer {l}: {} batch channels vs {} running channels",
                    g.value(batch).numel(),
                    reference.numel()
                )));
            }
            let r = g.constant(reference.clone().reshape(g.shape(batch).to_vec())?);
            let d = g.sub(batch, r)?;
            let n = g.norm2(d);
            total = Some(match total {
                Some(t) => g.add(t, n)?,
                None => n,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// Cross entropy of the auxiliary head against joint labels `k`.
pub fn loss_csd<T: Scalar>(g: &mut Graph<T>, aux_logits: Var, k_labels: &[usize]) -> Result<Var> {
    cross_entropy(g, aux_logits, k_labels)
}

/// `KL(softmax(t/tau) || softmax(s/tau))`, batch mean, optionally times `tau^2`.
pub fn loss_kd<T: Scalar>(
    g: &mut Graph<T>,
    teacher_logits: Var,
    student_logits: Var,
    kd: &KdConfig,
) -> Result<Var> {
    if g.shape(teacher_logits) != g.shape(student_logits) {
        return Err(DfkdError::shape(format!(
            "kd: teacher {:?} vs student {:?}",
            g.shape(teacher_logits),
            g.shape(student_logits)
        )));
    }
    let (rows, _) = g.value(teacher_logits).dims2()?;
    let inv_tau = T::from_f64_lossy(1.0 / kd.temperature);
    let ts = g.scale(teacher_logits, inv_tau);
    let ss = g.scale(student_logits, inv_tau);
    let log_p = g.log_softmax(ts)?;
    let log_q = g.log_softmax(ss)?;
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    let mut factor = 1.0 / rows.max(1) as f64;
    if kd.scale_by_tau_sq {
        factor *= kd.temperature * kd.temperature;
    }
    Ok(g.scale(total, T::from_f64_lossy(factor)))
}

/// Mean squared error between the teacher map and the projected student map.
pub fn loss_fea<T: Scalar>(
    g: &mut Graph<T>,
    teacher_map: Var,
    projected_student_map: Var,
) -> Result<Var> {
    if g.shape(teacher_map) != g.shape(projected_student_map) {
        return Err(DfkdError::shape(format!(
            "feature maps differ after projection: teacher {:?} vs student {:?}",
            g.shape(teacher_map),
            g.shape(projected_student_map)
        )));
    }
    let d = g.sub(teacher_map, projected_student_map)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// The adversarial KL used by the `adv` ablation; identical to [`loss_kd`].
pub fn loss_adv_baseline<T: Scalar>(
    g: &mut Graph<T>,
    teacher_logits: Var,
    student_logits: Var,
    kd: &KdConfig,
) -> Result<Var> {
    loss_kd(g, teacher_logits, student_logits, kd)
}

/// Cross entropy of a rotation-only head against rotation labels `m`.
pub fn loss_rotation_baseline<T: Scalar>(
    g: &mut Graph<T>,
    aux_logits: Var,
    m_labels: &[usize],
) -> Result<Var> {
    cross_entropy(g, aux_logits, m_labels)
}

/// Which student-dependent term is maximized during synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialTerm {
    /// No adversarial term.
    None,
    /// Joint class-and-rotation cross entropy of the auxiliary head.
    Csd,
    /// Teacher-student KL.
    Adv,
    /// Rotation-only cross entropy of the auxiliary head.
    Rotation,
}

impl AdversarialTerm {
    pub fn aux_task(self) -> Option<AuxTask> {
        match self {
            AdversarialTerm::Csd => Some(AuxTask::Augmented),
            AdversarialTerm::Rotation => Some(AuxTask::Rotation),
            AdversarialTerm::None | AdversarialTerm::Adv => None,
        }
    }
}

/// Graph handles of the synthesis objective and its parts.
pub struct SynthesisTerms<T> {
    pub total: Var,
    pub cls: Var,
    pub bns: Var,
    /// The maximized term, absent for [`AdversarialTerm::None`].
    pub adversarial: Option<Var>,
    pub images: Var,
    pub generator_moments: Vec<BatchMoments<T>>,
}

/// Combines precomputed parts: `cls + bns - alpha * adv`.
pub fn compose_data_synthesis<T: Scalar>(
    g: &mut Graph<T>,
    cls: Var,
    bns: Var,
    adversarial: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    let narrow = g.add(cls, bns)?;
    match adversarial {
        Some(a) if alpha != 0.0 => {
            let w = g.scale(a, T::from_f64_lossy(alpha));
            g.sub(narrow, w)
        }
        _ => Ok(narrow),
    }
}

/// Adversarial term on images `x` with intended labels `labels`. Student and
/// auxiliary head are bound frozen and run with running BN statistics.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_term<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    term: AdversarialTerm,
    x: Var,
    teacher_logits: Var,
    student_vars: &CnnVars,
    aux_vars: &AuxVars,
    plan: Option<&AugmentationPlan>,
    kd: &KdConfig,
) -> Result<Option<Var>> {
    let needs_task = term.aux_task();
    if let Some(task) = needs_task {
        if bundle.arch.aux_task != task {
            return Err(DfkdError::Config(format!(
                "synthesis term {term:?} needs an auxiliary head for {task:?}, bundle has {:?}",
                bundle.arch.aux_task
            )));
        }
    }
    match term {
        AdversarialTerm::None => Ok(None),
        AdversarialTerm::Adv => {
            let out = bundle.student.forward(student_vars, g, x, BnMode::Eval)?;
            Ok(Some(loss_adv_baseline(g, teacher_logits, out.logits, kd)?))
        }
        AdversarialTerm::Csd | AdversarialTerm::Rotation => {
            let plan = plan.ok_or_else(|| {
                DfkdError::Config("rotation plan required for auxiliary term".into())
            })?;
            let xr = plan.apply_var(g, x)?;
            let out = bundle.student.forward(student_vars, g, xr, BnMode::Eval)?;
            let logits = bundle.aux.forward(aux_vars, g, out.features)?;
            let loss = if term == AdversarialTerm::Csd {
                loss_csd(g, logits, &plan.k_labels())?
            } else {
                loss_rotation_baseline(g, logits, &plan.rotation_labels())?
            };
            Ok(Some(loss))
        }
    }
}

/// `L_cls + L_bns - alpha * L_adv-term` for `x = G(z)`.
///
/// `generator_vars` decides which of `z` and the generator weights are
/// trainable. Teacher, student and auxiliary head never receive gradients.
#[allow(clippy::too_many_arguments)]
pub fn loss_data_synthesis<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    generator_vars: &GeneratorVars,
    z: Var,
    labels: &[usize],
    term: AdversarialTerm,
    plan: Option<&AugmentationPlan>,
    weights: &LossWeights,
    kd: &KdConfig,
) -> Result<SynthesisTerms<T>> {
    let (x, generator_moments) = bundle
        .generator
        .forward(generator_vars, g, z, BnMode::Train)?;
    let teacher_vars = bundle.teacher.bind(g);
    let t = bundle.teacher.forward_with_hooks(&teacher_vars, g, x)?;
    let cls = loss_cls(g, t.logits, labels)?;
    let bns = loss_bns(g, &t.bn_stats, &bundle.teacher.running_stats())?;
    let (student_vars, aux_vars) = match term {
        AdversarialTerm::None => (None, None),
        _ => (
            Some(bundle.student.bind(g, crate::models::Binding::Frozen)),
            Some(bundle.aux.bind(g, crate::models::Binding::Frozen)),
        ),
    };
    let adversarial = match (&student_vars, &aux_vars) {
        (Some(sv), Some(av)) => adversarial_term(g, bundle, term, x, t.logits, sv, av, plan, kd)?,
        _ => None,
    };
    let total = compose_data_synthesis(g, cls, bns, adversarial, weights.alpha)?;
    Ok(SynthesisTerms {
        total,
        cls,
        bns,
        adversarial,
        images: x,
        generator_moments,
    })
}

/// Graph handles of the student objective and its parts.
pub struct TransferTerms<T> {
    pub total: Var,
    pub ce: Var,
    pub kd: Var,
    pub fea: Var,
    pub student_logits: Var,
    pub student_features: Var,
    pub student_moments: Vec<BatchMoments<T>>,
}

/// `ce + kd + beta * fea`.
pub fn compose_knowledge_transfer<T: Scalar>(
    g: &mut Graph<T>,
    ce: Var,
    kd: Var,
    fea: Var,
    beta: f64,
) -> Result<Var> {
    let a = g.add(ce, kd)?;
    if beta == 0.0 {
        return Ok(a);
    }
    let f = g.scale(fea, T::from_f64_lossy(beta));
    g.add(a, f)
}

/// Student objective on bank images `x` with stored labels. The student runs
/// with batch statistics; its moments are returned for a running update.
#[allow(clippy::too_many_arguments)]
pub fn loss_knowledge_transfer<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    student_vars: &CnnVars,
    projector_vars: &ProjectorVars,
    x: Var,
    labels: &[usize],
    weights: &LossWeights,
    kd: &KdConfig,
) -> Result<TransferTerms<T>> {
    let teacher_vars = bundle.teacher.bind(g);
    let t = bundle.teacher.forward(&teacher_vars, g, x)?;
    let s = bundle.student.forward(student_vars, g, x, BnMode::Train)?;
    let ce = cross_entropy(g, s.logits, labels)?;
    let kd_loss = loss_kd(g, t.logits, s.logits, kd)?;
    let projected = bundle.projector.forward(projector_vars, g, s.feature_map)?;
    let fea = loss_fea(g, t.feature_map, projected)?;
    let total = compose_knowledge_transfer(g, ce, kd_loss, fea, weights.beta)?;
    Ok(TransferTerms {
        total,
        ce,
        kd: kd_loss,
        fea,
        student_logits: s.logits,
        student_features: s.features,
        student_moments: s.moments,
    })
}

/// Plain-value cross entropy, for checks outside a graph.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let v = cross_entropy(&mut g, l, labels)?;
    Ok(g.scalar(v).as_f64())
}
