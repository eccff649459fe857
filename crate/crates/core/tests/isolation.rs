//! Which parameters each stage and sub-step is allowed to move, checked by
//! hashing parameter blobs before and after.

mod common;

use common::{module_hash, probe_arch, probe_bundle, rng};
use dfkd::autograd::Graph;
use dfkd::bank::{warm_up, BankConfig, ImageBank};
use dfkd::distill::{
    aux_update, evaluate, evaluate_aux, run_transfer_stage, run_transfer_stage_joint,
    student_update, LabeledImages, Strategy, TransferConfig, TransferState,
};
use dfkd::losses::{self, AdversarialTerm, KdConfig, LossWeights};
use dfkd::models::{build_models, AuxTask, Binding, BnMode, ModelBundle};
use dfkd::optim::{cosine_lr, Sgd};
use dfkd::rng::RngStreams;
use dfkd::selfsup::{AugmentationPlan, RotationPolicy};
use dfkd::synthesis::{
    assign_labels, run_synthesis_stage, sample_noise, select_ablation_objective, LabelPolicy,
    SynthesisConfig, SynthesisOutput, SynthesisRngs, Variant,
};
use dfkd::Tensor;

#[derive(Debug, PartialEq, Eq, Clone)]
struct Hashes {
    teacher: String,
    student: String,
    projector: String,
    generator: String,
    aux: String,
}

fn hashes(b: &ModelBundle<f64>) -> Hashes {
    Hashes {
        teacher: module_hash(&b.teacher),
        student: module_hash(&b.student),
        projector: module_hash(&b.projector),
        generator: module_hash(&b.generator),
        aux: module_hash(&b.aux),
    }
}

fn synth_cfg(steps: usize) -> SynthesisConfig {
    SynthesisConfig {
        steps,
        batch_size: 8,
        lr: 0.01,
        ..Default::default()
    }
}

fn synthesize(
    b: &mut ModelBundle<f64>,
    variant: Variant,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> SynthesisOutput<f64> {
    run_synthesis_stage(
        b,
        &synth_cfg(steps),
        &select_ablation_objective(variant, alpha),
        &KdConfig::default(),
        SynthesisRngs {
            noise: &mut rng(seed),
            labels: &mut rng(seed + 1),
            rotation: &mut rng(seed + 2),
        },
    )
    .unwrap()
}

#[test]
fn synthesis_moves_only_noise_and_generator() {
    let mut b = probe_bundle::<f64>(1);
    let before = hashes(&b);
    let out = synthesize(&mut b, Variant::Csd, 10.0, 5, 100);
    let after = hashes(&b);
    assert_ne!(after.generator, before.generator);
    assert_eq!(
        Hashes {
            generator: before.generator.clone(),
            ..after
        },
        before
    );
    assert_eq!(out.images.shape(), &[8, 1, 8, 8]);
    assert_eq!(out.labels.len(), 8);
    assert!(out.trace.iter().all(|s| s.total.is_finite()));

    // Had z stayed put, the output would equal the final generator on the initial noise.
    let z0 = sample_noise::<f64, _>(8, b.arch.noise_dim, &mut rng(100));
    assert_ne!(b.generator.generate(&z0).unwrap().data(), out.images.data());
}

#[test]
fn zero_steps_returns_the_initial_generator_output() {
    let mut b = probe_bundle::<f64>(2);
    let before = hashes(&b);
    let out = synthesize(&mut b, Variant::Csd, 10.0, 0, 7);
    assert_eq!(hashes(&b), before);
    let z0 = sample_noise::<f64, _>(8, b.arch.noise_dim, &mut rng(7));
    assert_eq!(b.generator.generate(&z0).unwrap().data(), out.images.data());
    assert!(out.trace.is_empty());
}

#[test]
fn synthesis_is_reproducible() {
    let mut a = probe_bundle::<f64>(3);
    let mut b = probe_bundle::<f64>(3);
    let x = synthesize(&mut a, Variant::Csd, 10.0, 4, 9);
    let y = synthesize(&mut b, Variant::Csd, 10.0, 4, 9);
    assert_eq!(x.images.data(), y.images.data());
    assert_eq!(x.labels, y.labels);
}

#[test]
fn baseline_equals_csd_without_weight() {
    let mut a = probe_bundle::<f64>(4);
    let mut b = probe_bundle::<f64>(4);
    let x = synthesize(&mut a, Variant::Baseline, 10.0, 4, 11);
    let y = synthesize(&mut b, Variant::Csd, 0.0, 4, 11);
    assert_eq!(x.images.data(), y.images.data());
    for (s, t) in x.trace.iter().zip(&y.trace) {
        assert_eq!(s.total, t.total);
    }
}

#[test]
fn narrow_objective_descends_without_adversarial_term() {
    let mut b = probe_bundle::<f64>(5);
    let out = synthesize(&mut b, Variant::Baseline, 0.0, 20, 13);
    let first = out.trace.first().unwrap();
    let last = out.trace.last().unwrap();
    assert!(last.cls + last.bns < first.cls + first.bns);
}

#[test]
fn csd_term_rises_under_ascent_in_most_seeds() {
    let mut rises = 0;
    for seed in 0..10 {
        let mut b = probe_bundle::<f64>(20 + seed);
        // Every rotation each step, so the per-step value is not resampled.
        let cfg = SynthesisConfig {
            rotation_policy: RotationPolicy::AllRotations,
            ..synth_cfg(20)
        };
        let out = run_synthesis_stage(
            &mut b,
            &cfg,
            &select_ablation_objective(Variant::Csd, 10.0),
            &KdConfig::default(),
            SynthesisRngs {
                noise: &mut rng(1000 + seed),
                labels: &mut rng(1001 + seed),
                rotation: &mut rng(1002 + seed),
            },
        )
        .unwrap();
        if out.trace.last().unwrap().adversarial >= out.trace.first().unwrap().adversarial {
            rises += 1;
        }
    }
    assert!(rises >= 8, "L_csd rose in only {rises} of 10 runs");
}

#[test]
fn four_variants_give_four_objectives_and_adv_ignores_the_aux_head() {
    let b = probe_bundle::<f64>(6);
    let mut rot_arch = b.arch.clone();
    rot_arch.aux_task = AuxTask::Rotation;
    let mut rb = b.clone();
    rb.arch = rot_arch.clone();
    rb.aux = build_models::<f64, _>(&rot_arch, &mut rng(6)).unwrap().aux;

    let labels = [0, 1, 2, 3];
    let plan =
        AugmentationPlan::new(&labels, 10, 4, RotationPolicy::RandomRotation, &mut rng(1)).unwrap();
    let z = sample_noise::<f64, _>(4, b.arch.noise_dim, &mut rng(2));
    let weights = LossWeights {
        alpha: 10.0,
        beta: 0.0,
    };
    let value = |bundle: &ModelBundle<f64>, term| {
        let mut g = Graph::new();
        let gv = bundle.generator.bind(&mut g, Binding::Trainable);
        let zv = g.param(z.clone());
        let t = losses::loss_data_synthesis(
            &mut g,
            bundle,
            &gv,
            zv,
            &labels,
            term,
            Some(&plan),
            &weights,
            &KdConfig::default(),
        )
        .unwrap();
        g.scalar(t.total)
    };
    let vals = [
        value(&b, AdversarialTerm::Csd),
        value(&b, AdversarialTerm::Adv),
        value(&rb, AdversarialTerm::Rotation),
        value(&b, AdversarialTerm::None),
    ];
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(vals[i], vals[j], "variants {i} and {j} coincide");
        }
    }

    // Bind the aux head as trainable: the adv term still sends it nothing.
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn([4, 1, 8, 8], 1.0, &mut rng(3)));
    let tv = b.teacher.bind(&mut g);
    let t = b.teacher.forward(&tv, &mut g, x).unwrap();
    let sv = b.student.bind(&mut g, Binding::Frozen);
    let av = b.aux.bind(&mut g, Binding::Trainable);
    let adv = losses::adversarial_term(
        &mut g,
        &b,
        AdversarialTerm::Adv,
        x,
        t.logits,
        &sv,
        &av,
        None,
        &KdConfig::default(),
    )
    .unwrap()
    .unwrap();
    let grads = g.backward(adv).unwrap();
    assert!(av.vars().iter().all(|&v| grads.get(v).is_none()));
}

fn warm_bank(b: &mut ModelBundle<f64>, batches: usize) -> ImageBank {
    let mut bank = ImageBank::new(&BankConfig::default());
    let cfg = SynthesisConfig {
        steps: 3,
        batch_size: 10,
        ..Default::default()
    };
    warm_up(
        &mut bank,
        b,
        &cfg,
        &KdConfig::default(),
        batches,
        &RngStreams::new(5),
    )
    .unwrap();
    bank
}

fn test_set() -> LabeledImages<f64> {
    let x = Tensor::randn([20, 1, 8, 8], 1.0, &mut rng(77));
    LabeledImages::new(x, (0..20).map(|i| i % 10).collect()).unwrap()
}

#[test]
fn warm_up_fills_the_bank_without_touching_student_or_aux() {
    let mut b = probe_bundle::<f64>(7);
    let before = hashes(&b);
    let bank = warm_bank(&mut b, 3);
    assert_eq!(bank.len(), 30);
    let after = hashes(&b);
    assert_eq!(
        (&after.teacher, &after.student, &after.aux, &after.projector),
        (
            &before.teacher,
            &before.student,
            &before.aux,
            &before.projector
        )
    );
    assert!(bank.histogram(10).iter().all(|&c| c == 3));
}

#[test]
fn separate_sub_steps_move_disjoint_parameter_sets() {
    let mut b = probe_bundle::<f64>(8);
    let bank = warm_bank(&mut b, 2);
    let (x, labels) = bank.sample::<f64, _>(6, &mut rng(1)).unwrap();
    let plan =
        AugmentationPlan::new(&labels, 10, 4, RotationPolicy::AllRotations, &mut rng(2)).unwrap();
    let mut opt_s = Sgd::new(0.1, 0.9, 1e-4);
    let mut opt_c = Sgd::new(0.1, 0.9, 1e-4);
    for step in 0..3 {
        let h0 = hashes(&b);
        student_update(
            &mut b,
            &mut opt_s,
            &x,
            &labels,
            &LossWeights::default(),
            &KdConfig::default(),
            step,
        )
        .unwrap();
        let h1 = hashes(&b);
        assert_ne!(h1.student, h0.student);
        assert_ne!(h1.projector, h0.projector);
        assert_eq!(
            (&h1.aux, &h1.teacher, &h1.generator),
            (&h0.aux, &h0.teacher, &h0.generator)
        );

        aux_update(&mut b, &mut opt_c, &x, &plan, step).unwrap();
        let h2 = hashes(&b);
        assert_ne!(h2.aux, h1.aux);
        assert_eq!(
            Hashes {
                aux: h1.aux.clone(),
                ..h2
            },
            h1
        );
    }
}

fn transfer_cfg(steps: usize, lr: f64) -> TransferConfig {
    TransferConfig {
        steps,
        batch_size: 8,
        lr,
        aux_probe_size: 16,
        ..Default::default()
    }
}

fn run_stage(
    b: &mut ModelBundle<f64>,
    bank: &ImageBank,
    strategy: Strategy,
    cfg: &TransferConfig,
    total: u64,
) -> dfkd::distill::TransferOutput {
    let mut state = TransferState::new(cfg, total);
    let args = (&LossWeights::default(), &KdConfig::default());
    match strategy {
        Strategy::Separate => run_transfer_stage(
            b,
            bank,
            cfg,
            &mut state,
            args.0,
            args.1,
            1,
            &test_set(),
            &mut rng(3),
        )
        .unwrap(),
        Strategy::Joint => run_transfer_stage_joint(
            b,
            bank,
            cfg,
            &mut state,
            args.0,
            args.1,
            1,
            &test_set(),
            &mut rng(3),
        )
        .unwrap(),
    }
}

#[test]
fn transfer_stages_keep_teacher_and_generator_fixed() {
    for strategy in [Strategy::Separate, Strategy::Joint] {
        let mut b = probe_bundle::<f64>(9);
        let bank = warm_bank(&mut b, 2);
        let before = hashes(&b);
        for _ in 0..3 {
            run_stage(&mut b, &bank, strategy, &transfer_cfg(5, 0.05), 15);
        }
        let after = hashes(&b);
        assert_eq!(after.teacher, before.teacher);
        assert_eq!(after.generator, before.generator);
        assert_ne!(after.student, before.student);
        assert_ne!(after.projector, before.projector);
        assert_ne!(after.aux, before.aux);
    }
}

/// Hash of trainable parameters only; BN running statistics excluded.
fn param_hashes(b: &ModelBundle<f64>) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let mut push = |m: &dyn dfkd::models::Module<f64>| {
        let mut v = Vec::new();
        m.visit_params(&mut |_, t| v.extend(t.data().iter().map(|x| x.to_bits())));
        out.push(v);
    };
    push(&b.teacher);
    push(&b.student);
    push(&b.projector);
    push(&b.generator);
    push(&b.aux);
    out
}

#[test]
fn zero_learning_rate_leaves_parameters_and_strategies_agree() {
    let mut results = Vec::new();
    for strategy in [Strategy::Separate, Strategy::Joint] {
        let mut b = probe_bundle::<f64>(10);
        let bank = warm_bank(&mut b, 2);
        let before = param_hashes(&b);
        let out = run_stage(&mut b, &bank, strategy, &transfer_cfg(1, 0.0), 1);
        assert_eq!(param_hashes(&b), before);
        assert_eq!(out.trace.len(), 1);
        assert!(out.metrics.student_acc >= 0.0 && out.metrics.student_acc <= 1.0);
        results.push(out.metrics);
    }
    let (s, j) = (results[0], results[1]);
    assert_eq!(
        (s.l_ce, s.l_kd, s.l_fea, s.student_acc),
        (j.l_ce, j.l_kd, j.l_fea, j.student_acc)
    );
}

#[test]
fn transfer_objective_sends_no_gradient_to_the_aux_head() {
    let b = probe_bundle::<f64>(11);
    let mut g = Graph::new();
    let sv = b.student.bind(&mut g, Binding::Trainable);
    let pv = b.projector.bind(&mut g, Binding::Trainable);
    let av = b.aux.bind(&mut g, Binding::Trainable);
    let x = g.constant(Tensor::randn([4, 1, 8, 8], 1.0, &mut rng(4)));
    let terms = losses::loss_knowledge_transfer(
        &mut g,
        &b,
        &sv,
        &pv,
        x,
        &[1, 2, 3, 4],
        &LossWeights::default(),
        &KdConfig::default(),
    )
    .unwrap();
    let grads = g.backward(terms.total).unwrap();
    assert!(av.vars().iter().all(|&v| grads.get(v).is_none()));
    assert!(sv.vars().iter().all(|&v| grads.get(v).is_some()));
}

#[test]
fn learning_rate_follows_the_run_wide_cosine() {
    let mut b = probe_bundle::<f64>(12);
    let bank = warm_bank(&mut b, 2);
    let cfg = transfer_cfg(6, 0.1);
    let total = 18;
    let mut state = TransferState::new(&cfg, total);
    let mut lrs = Vec::new();
    for round in 1..=3 {
        let out = run_transfer_stage(
            &mut b,
            &bank,
            &cfg,
            &mut state,
            &LossWeights::default(),
            &KdConfig::default(),
            round,
            &test_set(),
            &mut rng(round as u64),
        )
        .unwrap();
        lrs.extend(out.trace.iter().map(|s| s.lr));
    }
    assert_eq!(lrs.len(), total as usize);
    for (s, lr) in lrs.iter().enumerate() {
        let want = 0.1 * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos()) / 2.0;
        assert!((lr - want).abs() < 1e-12);
        assert!((lr - cosine_lr(0.1, s as u64, total)).abs() < 1e-12);
    }
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn student_cross_entropy_falls_over_a_stage() {
    let mut b = build_models::<f64, _>(&probe_arch(1, 8), &mut rng(13)).unwrap();
    b.teacher = probe_bundle::<f64>(13).teacher;
    let bank = warm_bank(&mut b, 4);
    let out = run_stage(
        &mut b,
        &bank,
        Strategy::Separate,
        &transfer_cfg(200, 0.05),
        200,
    );
    let window =
        |s: &[dfkd::distill::TransferStep]| s.iter().map(|t| t.ce).sum::<f64>() / s.len() as f64;
    let first = window(&out.trace[..10]);
    let last = window(&out.trace[190..]);
    assert!(last < first, "ce went from {first} to {last}");
}

#[test]
fn teacher_evaluation_is_deterministic() {
    let b = probe_bundle::<f64>(14);
    let t = test_set();
    assert_eq!(
        evaluate(&b.teacher, &t).unwrap(),
        evaluate(&b.teacher, &t).unwrap()
    );
    // Inference mode: running statistics are read, batch order does not matter.
    let idx: Vec<usize> = (0..20).rev().collect();
    let rev = LabeledImages::new(
        t.images.select_rows(&idx).unwrap(),
        idx.iter().map(|&i| t.labels[i]).collect(),
    )
    .unwrap();
    assert_eq!(
        evaluate(&b.teacher, &t).unwrap(),
        evaluate(&b.teacher, &rev).unwrap()
    );
    let _ = BnMode::Eval;
}

#[test]
fn uniform_labels_stay_within_three_sigma() {
    let n = 10_000;
    let labels = assign_labels(n, 10, LabelPolicy::Uniform, &mut rng(15));
    let sigma = (0.1 * 0.9 / n as f64).sqrt();
    let mut counts = [0usize; 10];
    labels.iter().for_each(|&l| counts[l] += 1);
    for c in counts {
        assert!(
            (c as f64 / n as f64 - 0.1).abs() <= 3.0 * sigma,
            "count {c}"
        );
    }
}

#[test]
fn aux_accuracy_ignores_probe_order() {
    let b = probe_bundle::<f64>(18);
    let probe = Tensor::randn([12, 1, 8, 8], 1.0, &mut rng(19));
    let labels: Vec<usize> = (0..12).map(|i| (i * 7) % 10).collect();
    let a = evaluate_aux(&b, &probe, &labels).unwrap();
    let idx: Vec<usize> = vec![5, 0, 11, 3, 8, 1, 10, 2, 7, 4, 9, 6];
    let shuffled = probe.select_rows(&idx).unwrap();
    let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    assert_eq!(a, evaluate_aux(&b, &shuffled, &l2).unwrap());
    assert_eq!(a, evaluate_aux(&b, &probe, &labels).unwrap());
}
