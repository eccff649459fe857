//! The data-synthesis stage: optimize a noise batch and the generator so the
//! teacher recognizes the images, their BN statistics match the teacher's,
//! and the student's auxiliary task finds them hard.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{DfkdError, Result};
use crate::losses::{loss_data_synthesis, AdversarialTerm, KdConfig, LossWeights};
use crate::models::{Binding, ModelBundle};
use crate::optim::{apply_to_module, collect_grads, Adam, Optimizer};
use crate::selfsup::{AugmentationPlan, RotationPolicy};
use crate::tensor::{Scalar, Tensor};

/// Ablation variants of the synthesis objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Csd,
    Adv,
    Rotation,
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Csd,
        Variant::Adv,
        Variant::Rotation,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Csd => "csd",
            Variant::Adv => "adv",
            Variant::Rotation => "rotation",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DfkdError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DfkdError::UnknownVariant {
                kind: "variant",
                name: s.to_string(),
            })
    }
}

/// A synthesis objective: `L_cls + L_bns - alpha * term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthesisObjective {
    pub variant: Variant,
    pub term: AdversarialTerm,
    pub alpha: f64,
}

pub fn select_ablation_objective(variant: Variant, alpha: f64) -> SynthesisObjective {
    let term = match variant {
        Variant::Csd => AdversarialTerm::Csd,
        Variant::Adv => AdversarialTerm::Adv,
        Variant::Rotation => AdversarialTerm::Rotation,
        Variant::Baseline => AdversarialTerm::None,
    };
    SynthesisObjective {
        variant,
        term,
        alpha: if variant == Variant::Baseline {
            0.0
        } else {
            alpha
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelPolicy {
    Uniform,
    #[default]
    Balanced,
}

impl FromStr for LabelPolicy {
    type Err = DfkdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LabelPolicy::Uniform),
            "balanced" => Ok(LabelPolicy::Balanced),
            _ => Err(DfkdError::UnknownVariant {
                kind: "label policy",
                name: s.to_string(),
            }),
        }
    }
}

/// Target labels for a synthesis batch.
///
/// `Balanced` cycles through a shuffled class order, then shuffles the batch,
/// so every class count is within one of `count / classes`.
pub fn assign_labels<R: Rng + ?Sized>(
    count: usize,
    classes: usize,
    policy: LabelPolicy,
    rng: &mut R,
) -> Vec<usize> {
    if classes == 0 {
        return Vec::new();
    }
    match policy {
        LabelPolicy::Uniform => (0..count).map(|_| rng.random_range(0..classes)).collect(),
        LabelPolicy::Balanced => {
            let mut order: Vec<usize> = (0..classes).collect();
            order.shuffle(rng);
            let mut labels: Vec<usize> = (0..count).map(|i| order[i % classes]).collect();
            labels.shuffle(rng);
            labels
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Optimizer steps per round.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub label_policy: LabelPolicy,
    /// Rotation expansion used by the auxiliary term.
    pub rotation_policy: RotationPolicy,
    /// Keep generator weights across rounds instead of re-initializing.
    pub persistent_generator: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 64,
            lr: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            label_policy: LabelPolicy::Balanced,
            rotation_policy: RotationPolicy::RandomRotation,
            persistent_generator: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DfkdError::Config(
                "synthesis batch size must be at least 1".into(),
            ));
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(DfkdError::Config(
                "synthesis learning rate must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisStep {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub bns: f64,
    /// Value of the maximized term; zero when the objective has none.
    pub adversarial: f64,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub trace: Vec<SynthesisStep>,
}

/// Draws `z ~ N(0, I)` of shape `(batch, dim)`.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(
    batch: usize,
    dim: usize,
    rng: &mut R,
) -> Tensor<T> {
    let data = (0..batch * dim)
        .map(|_| T::from_f64_lossy(StandardNormal.sample(rng)))
        .collect();
    Tensor::new(vec![batch, dim], data).expect("noise shape")
}

/// Random streams consumed by one synthesis stage.
pub struct SynthesisRngs<'a, R: Rng + ?Sized> {
    pub noise: &'a mut R,
    pub labels: &'a mut R,
    pub rotation: &'a mut R,
}

/// Runs `cfg.steps` Adam steps over `(z, generator)` and returns `G(z)`.
///
/// Only `bundle.generator` is modified. The noise batch is drawn once.
pub fn run_synthesis_stage<T: Scalar, R: Rng + ?Sized>(
    bundle: &mut ModelBundle<T>,
    cfg: &SynthesisConfig,
    objective: &SynthesisObjective,
    kd: &KdConfig,
    rngs: SynthesisRngs<'_, R>,
) -> Result<SynthesisOutput<T>> {
    cfg.validate()?;
    let classes = bundle.arch.classes;
    let rotations = bundle.arch.rotations;
    let mut z = sample_noise::<T, _>(cfg.batch_size, bundle.arch.noise_dim, rngs.noise);
    let labels = assign_labels(cfg.batch_size, classes, cfg.label_policy, rngs.labels);
    let weights = LossWeights {
        alpha: objective.alpha,
        beta: 0.0,
    };
    let needs_plan = objective.term.aux_task().is_some();
    let mut adam = Adam::<T>::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let plan = if needs_plan {
            Some(AugmentationPlan::new(
                &labels,
                classes,
                rotations,
                cfg.rotation_policy,
                rngs.rotation,
            )?)
        } else {
            None
        };
        let mut g = Graph::new();
        let gen_vars = bundle.generator.bind(&mut g, Binding::Trainable);
        let zv = g.param(z.clone());
        let terms = loss_data_synthesis(
            &mut g,
            bundle,
            &gen_vars,
            zv,
            &labels,
            objective.term,
            plan.as_ref(),
            &weights,
            kd,
        )?;
        let rec = SynthesisStep {
            step,
            total: g.scalar(terms.total).as_f64(),
            cls: g.scalar(terms.cls).as_f64(),
            bns: g.scalar(terms.bns).as_f64(),
            adversarial: terms.adversarial.map_or(0.0, |a| g.scalar(a).as_f64()),
        };
        if ![rec.total, rec.cls, rec.bns, rec.adversarial]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(DfkdError::NonFinite {
                stage: "synthesis",
                step,
                detail: format!(
                    "total={} cls={} bns={} adversarial={}",
                    rec.total, rec.cls, rec.bns, rec.adversarial
                ),
            });
        }
        trace.push(rec);

        let mut grads = g.backward(terms.total)?;
        let gz = grads.take_or_zeros(zv, z.shape());
        let ggen = collect_grads(&g, &mut grads, &gen_vars.vars());
        drop(g);
        adam.begin_step();
        adam.update(0, &mut z, &gz);
        apply_to_module(&mut adam, 1, &mut bundle.generator, &ggen)?;
    }

    let images = bundle.generator.generate(&z)?;
    if !images.is_finite() {
        return Err(DfkdError::NonFinite {
            stage: "synthesis",
            step: cfg.steps,
            detail: "generator output".into(),
        });
    }
    Ok(SynthesisOutput {
        images,
        labels,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balanced_labels_are_within_one_of_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = assign_labels(40, 10, LabelPolicy::Balanced, &mut rng);
        let mut counts = [0usize; 10];
        l.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&c| c == 4));
        let l = assign_labels(7, 3, LabelPolicy::Balanced, &mut rng);
        let mut counts = [0usize; 3];
        l.iter().for_each(|&c| counts[c] += 1);
        assert_eq!(counts.iter().sum::<usize>(), 7);
        assert!(counts.iter().all(|&c| c == 2 || c == 3));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("cmi".parse::<Variant>().is_err());
    }

    #[test]
    fn baseline_has_no_adversarial_term() {
        let o = select_ablation_objective(Variant::Baseline, 10.0);
        assert_eq!(o.term, AdversarialTerm::None);
        assert_eq!(o.alpha, 0.0);
        assert_eq!(
            select_ablation_objective(Variant::Adv, 10.0)
                .term
                .aux_task(),
            None
        );
    }
}
