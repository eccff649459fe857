//! Loss values against closed-form oracles, plus algebraic properties.

mod common;

use proptest::prelude::*;

use common::{probe_arch, probe_bundle, rng};
use dfkd::autograd::{ChannelStats, Graph};
use dfkd::losses::{self, AdversarialTerm, KdConfig, LossWeights};
use dfkd::models::{build_models, Binding, BnMode, Module, Projector, StudentModel};
use dfkd::selfsup::{AugmentationPlan, RotationPolicy};
use dfkd::synthesis::{
    run_synthesis_stage, select_ablation_objective, SynthesisConfig, SynthesisRngs, Variant,
};
use dfkd::Tensor;

const ABS: f64 = 1e-6;

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn ce_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(r, &y)| -softmax(r)[y].ln())
        .sum::<f64>()
        / rows.len() as f64
}

fn kl_oracle(t: &[Vec<f64>], s: &[Vec<f64>], tau: f64) -> f64 {
    t.iter()
        .zip(s)
        .map(|(a, b)| {
            let p = softmax(&a.iter().map(|v| v / tau).collect::<Vec<_>>());
            let q = softmax(&b.iter().map(|v| v / tau).collect::<Vec<_>>());
            p.iter()
                .zip(&q)
                .map(|(pi, qi)| pi * (pi / qi).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / t.len() as f64
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn kd_value(t: &[Vec<f64>], s: &[Vec<f64>], kd: &KdConfig) -> f64 {
    let mut g = Graph::new();
    let tv = g.constant(tensor(t));
    let sv = g.constant(tensor(s));
    let l = losses::loss_kd(&mut g, tv, sv, kd).unwrap();
    g.scalar(l)
}

fn zeros(b: usize, n: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; n]; b]
}

#[test]
#[allow(clippy::approx_constant)]
fn uniform_logits_give_log_class_count() {
    let mut g = Graph::new();
    let l = g.constant(tensor(&zeros(3, 10)));
    let v = losses::loss_cls(&mut g, l, &[0, 4, 9]).unwrap();
    assert!((g.scalar(v) - 10f64.ln()).abs() < ABS);
    assert!((g.scalar(v) - 2.302585).abs() < ABS);

    let l = g.constant(tensor(&zeros(2, 40)));
    let v = losses::loss_csd(&mut g, l, &[0, 39]).unwrap();
    assert!((g.scalar(v) - 40f64.ln()).abs() < ABS);
    assert!((g.scalar(v) - 3.688879).abs() < ABS);

    let l = g.constant(tensor(&zeros(2, 4)));
    let v = losses::loss_rotation_baseline(&mut g, l, &[1, 3]).unwrap();
    assert!((g.scalar(v) - 4f64.ln()).abs() < ABS);
    assert!((g.scalar(v) - 1.386294).abs() < ABS);
}

#[test]
fn saturated_logits_give_near_zero_cross_entropy() {
    let mut row = vec![0.0; 10];
    row[6] = 30.0;
    let mut g = Graph::new();
    let l = g.constant(tensor(&[row]));
    let v = losses::loss_cls(&mut g, l, &[6]).unwrap();
    assert!(g.scalar(v) < 1e-9);
}

#[test]
fn bns_of_three_four_offset_is_five() {
    let mut g = Graph::<f64>::new();
    let mean = g.constant(Tensor::new(vec![2], vec![3.5, 4.25]).unwrap());
    let var = g.constant(Tensor::new(vec![2], vec![2.0, 0.5]).unwrap());
    let running_mean = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
    let running_var = Tensor::new(vec![2], vec![2.0, 0.5]).unwrap();
    let v = losses::loss_bns(
        &mut g,
        &[ChannelStats { mean, var }],
        &[(&running_mean, &running_var)],
    )
    .unwrap();
    assert!((g.scalar(v) - 5.0).abs() < ABS);

    let same = losses::loss_bns(
        &mut g,
        &[ChannelStats { mean: var, var }],
        &[(&running_var, &running_var)],
    )
    .unwrap();
    assert_eq!(g.scalar(same), 0.0);
}

#[test]
fn kl_analytic_case() {
    let t = vec![vec![1.0, 0.0]];
    let s = vec![vec![0.0, 1.0]];
    // p = softmax(1, 0), q = reversed, so KL = (p0 - p1) * 1 = (e - 1) / (e + 1).
    let e = std::f64::consts::E;
    let analytic = (e - 1.0) / (e + 1.0);
    assert!((kl_oracle(&t, &s, 1.0) - analytic).abs() < 1e-12);
    for scale in [false, true] {
        let kd = KdConfig {
            temperature: 1.0,
            scale_by_tau_sq: scale,
        };
        assert!((kd_value(&t, &s, &kd) - analytic).abs() < ABS);
    }
    let kd = KdConfig {
        temperature: 2.0,
        scale_by_tau_sq: true,
    };
    assert!((kd_value(&t, &s, &kd) - 4.0 * kl_oracle(&t, &s, 2.0)).abs() < ABS);
}

#[test]
fn fea_of_unit_residual_is_one_and_identity_is_zero() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::randn([2, 3, 2, 2], 1.0, &mut rng(1));
    let b = a.map(|v| v - 1.0);
    let av = g.constant(a);
    let bv = g.constant(b);
    let v = losses::loss_fea(&mut g, av, bv).unwrap();
    assert!((g.scalar(v) - 1.0).abs() < ABS);
    let z = losses::loss_fea(&mut g, av, av).unwrap();
    assert_eq!(g.scalar(z), 0.0);
}

#[test]
fn rotation_and_joint_losses_differ_for_several_classes() {
    let logits = Tensor::randn([4, 40], 1.0, &mut rng(2));
    let plan = AugmentationPlan::new(
        &[1, 2, 3, 4],
        10,
        4,
        RotationPolicy::RandomRotation,
        &mut rng(3),
    )
    .unwrap();
    let mut g = Graph::<f64>::new();
    let l = g.constant(logits.clone());
    let csd = losses::loss_csd(&mut g, l, &plan.k_labels()).unwrap();
    let sliced = Tensor::new(
        vec![4, 4],
        logits
            .data()
            .chunks(40)
            .flat_map(|r| r[..4].to_vec())
            .collect(),
    )
    .unwrap();
    let r = g.constant(sliced);
    let rot = losses::loss_rotation_baseline(&mut g, r, &plan.rotation_labels()).unwrap();
    assert!((g.scalar(csd) - g.scalar(rot)).abs() > 1e-6);
}

/// Builds a student equal to the teacher whose running statistics match the
/// probe batch, so batch-statistic and running-statistic passes agree.
#[test]
fn cloned_student_with_identity_projector_reduces_transfer_to_cross_entropy() {
    let mut arch = probe_arch(1, 8);
    arch.student = arch.teacher.clone();
    let mut b = build_models::<f64, _>(&arch, &mut rng(4)).unwrap();
    let x = Tensor::randn([6, 1, 8, 8], 1.0, &mut rng(5));
    let moments = {
        let mut g = Graph::new();
        let tv = b.teacher.net().bind(&mut g, Binding::Frozen);
        let xv = g.constant(x.clone());
        b.teacher
            .net()
            .forward(&tv, &mut g, xv, BnMode::Train)
            .unwrap()
            .moments
    };
    let mut i = 0;
    b.teacher.visit_buffers_mut(&mut |name, t| {
        let m = &moments[i / 2];
        let src = if name.ends_with("running_mean") {
            &m.mean
        } else {
            &m.var
        };
        t.data_mut().copy_from_slice(src);
        i += 1;
    });
    b.student = StudentModel::new(b.teacher.net().clone());
    let (c, h, w) = b.teacher.net().spec().feature_map_shape();
    b.projector = Projector::identity(c, h, w);

    let labels = [0, 1, 2, 3, 4, 5];
    let kd = KdConfig::default();
    for beta in [30.0, 0.0] {
        let weights = LossWeights { alpha: 0.0, beta };
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Trainable);
        let pv = b.projector.bind(&mut g, Binding::Trainable);
        let xv = g.constant(x.clone());
        let terms =
            losses::loss_knowledge_transfer(&mut g, &b, &sv, &pv, xv, &labels, &weights, &kd)
                .unwrap();
        assert!(g.scalar(terms.kd).abs() < 1e-9, "kd {}", g.scalar(terms.kd));
        assert!(
            g.scalar(terms.fea).abs() < 1e-9,
            "fea {}",
            g.scalar(terms.fea)
        );
        assert!((g.scalar(terms.total) - g.scalar(terms.ce)).abs() < 1e-8);
    }
}

#[test]
fn transfer_total_is_the_weighted_sum_of_independent_terms() {
    let b = probe_bundle::<f64>(6);
    let x = Tensor::randn([5, 1, 8, 8], 1.0, &mut rng(7));
    let labels = [9, 8, 7, 6, 5];
    let kd = KdConfig::default();
    for beta in [0.0, 1.0, 30.0] {
        let weights = LossWeights { alpha: 0.0, beta };
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Trainable);
        let pv = b.projector.bind(&mut g, Binding::Trainable);
        let xv = g.constant(x.clone());
        let terms =
            losses::loss_knowledge_transfer(&mut g, &b, &sv, &pv, xv, &labels, &weights, &kd)
                .unwrap();

        // Recompute each term in a fresh graph.
        let mut h = Graph::new();
        let xv = h.constant(x.clone());
        let tv = b.teacher.bind(&mut h);
        let t = b.teacher.forward(&tv, &mut h, xv).unwrap();
        let sv = b.student.bind(&mut h, Binding::Frozen);
        let s = b.student.forward(&sv, &mut h, xv, BnMode::Train).unwrap();
        let pv = b.projector.bind(&mut h, Binding::Frozen);
        let proj = b.projector.forward(&pv, &mut h, s.feature_map).unwrap();
        let t_rows: Vec<Vec<f64>> = h
            .value(t.logits)
            .data()
            .chunks(10)
            .map(<[f64]>::to_vec)
            .collect();
        let s_rows: Vec<Vec<f64>> = h
            .value(s.logits)
            .data()
            .chunks(10)
            .map(<[f64]>::to_vec)
            .collect();
        let ce = ce_oracle(&s_rows, &labels);
        let kl = kl_oracle(&t_rows, &s_rows, kd.temperature) * kd.temperature * kd.temperature;
        let (tm, pm) = (h.value(t.feature_map).data(), h.value(proj).data());
        let fea = tm.iter().zip(pm).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tm.len() as f64;

        assert!((g.scalar(terms.ce) - ce).abs() < ABS);
        assert!((g.scalar(terms.kd) - kl).abs() < ABS);
        assert!((g.scalar(terms.fea) - fea).abs() < ABS);
        assert!((g.scalar(terms.total) - (ce + kl + beta * fea)).abs() < ABS);
        if beta == 0.0 {
            assert_eq!(
                g.scalar(terms.total),
                g.scalar(terms.ce) + g.scalar(terms.kd)
            );
        }
    }
}

#[test]
fn synthesis_total_is_narrow_minus_weighted_term() {
    let b = probe_bundle::<f64>(8);
    let labels = [1, 3, 5, 7];
    let plan =
        AugmentationPlan::new(&labels, 10, 4, RotationPolicy::AllRotations, &mut rng(0)).unwrap();
    let z = Tensor::randn([4, 8], 1.0, &mut rng(9));
    for (term, alpha) in [
        (AdversarialTerm::None, 0.0),
        (AdversarialTerm::Csd, 0.0),
        (AdversarialTerm::Csd, 10.0),
        (AdversarialTerm::Adv, 10.0),
    ] {
        let mut g = Graph::new();
        let gv = b.generator.bind(&mut g, Binding::Trainable);
        let zv = g.param(z.clone());
        let weights = LossWeights { alpha, beta: 30.0 };
        let t = losses::loss_data_synthesis(
            &mut g,
            &b,
            &gv,
            zv,
            &labels,
            term,
            Some(&plan),
            &weights,
            &KdConfig::default(),
        )
        .unwrap();
        let cls = g.scalar(t.cls);
        let bns = g.scalar(t.bns);
        let adv = t.adversarial.map_or(0.0, |a| g.scalar(a));
        assert!((g.scalar(t.total) - (cls + bns - alpha * adv)).abs() < ABS);
        if alpha == 0.0 {
            assert_eq!(g.scalar(t.total), cls + bns);
        } else {
            assert!(adv > 0.0);
            assert!(g.scalar(t.total) < cls + bns);
        }
    }
}

#[test]
fn input_ascent_on_csd_increases_it() {
    let b = probe_bundle::<f64>(10);
    let labels = [0, 2, 4, 6];
    let plan =
        AugmentationPlan::new(&labels, 10, 4, RotationPolicy::AllRotations, &mut rng(0)).unwrap();
    let mut x = Tensor::randn([4, 1, 8, 8], 1.0, &mut rng(11));
    let mut last = f64::NEG_INFINITY;
    for _ in 0..10 {
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Frozen);
        let av = b.aux.bind(&mut g, Binding::Frozen);
        let xv = g.param(x.clone());
        let xr = plan.apply_var(&mut g, xv).unwrap();
        let s = b.student.forward(&sv, &mut g, xr, BnMode::Eval).unwrap();
        let logits = b.aux.forward(&av, &mut g, s.features).unwrap();
        let l = losses::loss_csd(&mut g, logits, &plan.k_labels()).unwrap();
        let v = g.scalar(l);
        assert!(v > last, "{v} did not increase past {last}");
        last = v;
        let mut grads = g.backward(l).unwrap();
        let gx = grads.take_or_zeros(xv, x.shape());
        x = x.zip_map(&gx, |a, d| a + 0.05 * d);
    }
}

#[test]
fn adversarial_synthesis_raises_teacher_student_divergence() {
    let mut b = probe_bundle::<f64>(12);
    let cfg = SynthesisConfig {
        steps: 30,
        batch_size: 16,
        lr: 0.05,
        ..Default::default()
    };
    let objective = select_ablation_objective(Variant::Adv, 100.0);
    let out = run_synthesis_stage(
        &mut b,
        &cfg,
        &objective,
        &KdConfig::default(),
        SynthesisRngs {
            noise: &mut rng(1),
            labels: &mut rng(2),
            rotation: &mut rng(3),
        },
    )
    .unwrap();
    let first = out.trace.first().unwrap().adversarial;
    let last = out.trace.last().unwrap().adversarial;
    assert!(last > first, "KL went from {first} to {last}");
}

fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-20.0f64..20.0, cols), rows)
}

fn pair_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..5, 2usize..11).prop_flat_map(|(b, n)| (logits_strategy(b, n), logits_strategy(b, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn losses_are_non_negative((t, s) in pair_strategy(), tau in 0.1f64..40.0, label_seed in any::<u64>()) {
        let n = t[0].len();
        let labels: Vec<usize> = (0..t.len()).map(|i| ((label_seed >> (i * 8)) as usize) % n).collect();
        let kd = KdConfig { temperature: tau, scale_by_tau_sq: true };
        let mut g = Graph::new();
        let tv = g.constant(tensor(&t));
        let sv = g.constant(tensor(&s));
        let vals = [
            losses::loss_cls(&mut g, tv, &labels).unwrap(),
            losses::loss_csd(&mut g, sv, &labels).unwrap(),
            losses::loss_rotation_baseline(&mut g, sv, &labels).unwrap(),
            losses::loss_kd(&mut g, tv, sv, &kd).unwrap(),
            losses::loss_adv_baseline(&mut g, tv, sv, &kd).unwrap(),
            losses::loss_fea(&mut g, tv, sv).unwrap(),
        ];
        for v in vals {
            prop_assert!(g.scalar(v) >= 0.0, "negative loss {}", g.scalar(v));
        }
        prop_assert!((g.scalar(vals[0]) - ce_oracle(&t, &labels)).abs() < ABS);
        prop_assert_eq!(g.scalar(vals[3]), g.scalar(vals[4]));
        let expect = kl_oracle(&t, &s, tau) * tau * tau;
        prop_assert!((g.scalar(vals[3]) - expect).abs() < ABS * expect.max(1.0));
    }

    #[test]
    fn kd_of_identical_logits_is_zero(t in logits_strategy(3, 7), tau in 0.05f64..50.0, scale in any::<bool>()) {
        let kd = KdConfig { temperature: tau, scale_by_tau_sq: scale };
        prop_assert!(kd_value(&t, &t, &kd).abs() < 1e-12);
    }

    #[test]
    fn temperature_preserves_argmax(row in prop::collection::vec(-50.0f64..50.0, 2..20), tau in 0.01f64..100.0) {
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, row.len()], row.clone()).unwrap());
        let soft = g.scale(l, 1.0 / tau);
        let lp = g.log_softmax(soft).unwrap();
        let p: Vec<f64> = g.value(lp).data().iter().map(|v| v.exp()).collect();
        prop_assert_eq!(argmax(&p), argmax(&row));
    }
}
