//! Central-difference gradient checks on probe networks at 64-bit precision.
//! Each check reports `(name, relative error)` pairs.

use super::{params, probe_bundle, rng, set_params};
use dfkd::autograd::{Graph, Var};
use dfkd::losses::{self, AdversarialTerm, KdConfig, LossWeights};
use dfkd::models::{Binding, BnMode, ModelBundle};
use dfkd::optim::collect_grads;
use dfkd::selfsup::{AugmentationPlan, RotationPolicy};
use dfkd::synthesis::sample_noise;
use dfkd::Tensor;

const H: f64 = 1e-5;
/// Bound on the relative error at 64-bit precision.
pub const TOL: f64 = 1e-4;
pub const LABELS: [usize; 4] = [3, 7, 0, 9];

type Eval<'a> = dyn Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) + 'a;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - n|| / max(||a||, ||n||)` over the concatenation of all gradients,
/// with `n` from central differences.
fn relative_error(point: &[Tensor<f64>], f: &Eval<'_>) -> f64 {
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len());
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut p = point.to_vec();
    for (i, t) in point.iter().enumerate() {
        assert_eq!(analytic[i].shape(), t.shape());
        a.extend_from_slice(analytic[i].data());
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            p[i].data_mut()[j] = x0 + H;
            let up = f(&p).0;
            p[i].data_mut()[j] = x0 - H;
            let down = f(&p).0;
            p[i].data_mut()[j] = x0;
            n.push((up - down) / (2.0 * H));
        }
    }
    let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
    let scale = norm(&a).max(norm(&n));
    assert!(scale > 1e-8, "gradient is identically zero");
    norm(&diff) / scale
}

pub fn images(seed: u64) -> Tensor<f64> {
    Tensor::randn([4, 1, 8, 8], 1.0, &mut rng(seed))
}

/// Generator params followed by `z`.
fn generator_point(b: &ModelBundle<f64>) -> Vec<Tensor<f64>> {
    let mut p = params(&b.generator);
    p.push(sample_noise(4, b.arch.noise_dim, &mut rng(11)));
    p
}

/// Evaluates a synthesis-side loss of `x = G(z)` with gradients for the
/// generator parameters and `z`.
fn through_generator<'a>(
    base: &'a ModelBundle<f64>,
    loss: impl Fn(&mut Graph<f64>, &ModelBundle<f64>, Var) -> Var + 'a,
) -> impl Fn(&[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) + 'a {
    move |p: &[Tensor<f64>]| {
        let mut b = base.clone();
        let (gen, z) = p.split_at(p.len() - 1);
        set_params(&mut b.generator, gen);
        let mut g = Graph::new();
        let gv = b.generator.bind(&mut g, Binding::Trainable);
        let zv = g.param(z[0].clone());
        let (x, _) = b.generator.forward(&gv, &mut g, zv, BnMode::Train).unwrap();
        let l = loss(&mut g, &b, x);
        let value = g.scalar(l);
        let mut grads = g.backward(l).unwrap();
        let mut out = collect_grads(&g, &mut grads, &gv.vars());
        out.push(grads.take_or_zeros(zv, z[0].shape()));
        (value, out)
    }
}

pub fn cls_gradient_through_generator_and_teacher(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(1);
    let f = through_generator(&b, |g, b, x| {
        let tv = b.teacher.bind(g);
        let out = b.teacher.forward_with_hooks(&tv, g, x).unwrap();
        losses::loss_cls(g, out.logits, &LABELS).unwrap()
    });
    report("L_cls", relative_error(&generator_point(&b), &f));
}

pub fn bns_gradient_through_teacher_hooks(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(2);
    let f = through_generator(&b, |g, b, x| {
        let tv = b.teacher.bind(g);
        let out = b.teacher.forward_with_hooks(&tv, g, x).unwrap();
        assert_eq!(out.bn_stats.len(), b.teacher.running_stats().len());
        losses::loss_bns(g, &out.bn_stats, &b.teacher.running_stats()).unwrap()
    });
    report(
        "L_bns via generator",
        relative_error(&generator_point(&b), &f),
    );

    let direct = |p: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let x = g.param(p[0].clone());
        let tv = b.teacher.bind(&mut g);
        let out = b.teacher.forward_with_hooks(&tv, &mut g, x).unwrap();
        let l = losses::loss_bns(&mut g, &out.bn_stats, &b.teacher.running_stats()).unwrap();
        let v = g.scalar(l);
        let mut grads = g.backward(l).unwrap();
        (v, vec![grads.take_or_zeros(x, p[0].shape())])
    };
    report("L_bns wrt images", relative_error(&[images(3)], &direct));
}

fn csd_plan() -> AugmentationPlan {
    AugmentationPlan::new(&LABELS, 10, 4, RotationPolicy::AllRotations, &mut rng(0)).unwrap()
}

pub fn csd_gradient_for_aux_head_and_images(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(4);
    let plan = csd_plan();
    let x0 = images(5);

    let wrt_aux = |p: &[Tensor<f64>]| {
        let mut b = b.clone();
        set_params(&mut b.aux, p);
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Frozen);
        let av = b.aux.bind(&mut g, Binding::Trainable);
        let x = g.constant(x0.clone());
        let xr = plan.apply_var(&mut g, x).unwrap();
        let s = b.student.forward(&sv, &mut g, xr, BnMode::Eval).unwrap();
        let logits = b.aux.forward(&av, &mut g, s.features).unwrap();
        let l = losses::loss_csd(&mut g, logits, &plan.k_labels()).unwrap();
        let v = g.scalar(l);
        let mut grads = g.backward(l).unwrap();
        (v, collect_grads(&g, &mut grads, &av.vars()))
    };
    report("L_csd wrt aux", relative_error(&params(&b.aux), &wrt_aux));

    let wrt_x = |p: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Frozen);
        let av = b.aux.bind(&mut g, Binding::Frozen);
        let x = g.param(p[0].clone());
        let xr = plan.apply_var(&mut g, x).unwrap();
        let s = b.student.forward(&sv, &mut g, xr, BnMode::Eval).unwrap();
        let logits = b.aux.forward(&av, &mut g, s.features).unwrap();
        let l = losses::loss_csd(&mut g, logits, &plan.k_labels()).unwrap();
        let v = g.scalar(l);
        let mut grads = g.backward(l).unwrap();
        (v, vec![grads.take_or_zeros(x, p[0].shape())])
    };
    report(
        "L_csd wrt images",
        relative_error(std::slice::from_ref(&x0), &wrt_x),
    );
}

pub fn kd_gradient_for_student(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(6);
    let x0 = images(7);
    for kd in [
        KdConfig::default(),
        KdConfig {
            temperature: 1.0,
            scale_by_tau_sq: false,
        },
        KdConfig {
            temperature: 4.0,
            scale_by_tau_sq: true,
        },
    ] {
        let f = |p: &[Tensor<f64>]| {
            let mut b = b.clone();
            set_params(&mut b.student, p);
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let tv = b.teacher.bind(&mut g);
            let t = b.teacher.forward(&tv, &mut g, x).unwrap();
            let sv = b.student.bind(&mut g, Binding::Trainable);
            let s = b.student.forward(&sv, &mut g, x, BnMode::Train).unwrap();
            let l = losses::loss_kd(&mut g, t.logits, s.logits, &kd).unwrap();
            let v = g.scalar(l);
            let mut grads = g.backward(l).unwrap();
            (v, collect_grads(&g, &mut grads, &sv.vars()))
        };
        report(
            &format!("L_kd tau={}", kd.temperature),
            relative_error(&params(&b.student), &f),
        );
    }
}

pub fn fea_gradient_for_student_and_projector(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(8);
    let x0 = images(9);
    let split = params(&b.student).len();
    let f = |p: &[Tensor<f64>]| {
        let mut b = b.clone();
        set_params(&mut b.student, &p[..split]);
        set_params(&mut b.projector, &p[split..]);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let tv = b.teacher.bind(&mut g);
        let t = b.teacher.forward(&tv, &mut g, x).unwrap();
        let sv = b.student.bind(&mut g, Binding::Trainable);
        let pv = b.projector.bind(&mut g, Binding::Trainable);
        let s = b.student.forward(&sv, &mut g, x, BnMode::Train).unwrap();
        let proj = b.projector.forward(&pv, &mut g, s.feature_map).unwrap();
        let l = losses::loss_fea(&mut g, t.feature_map, proj).unwrap();
        let v = g.scalar(l);
        let mut grads = g.backward(l).unwrap();
        let mut out = collect_grads(&g, &mut grads, &sv.vars());
        out.extend(collect_grads(&g, &mut grads, &pv.vars()));
        (v, out)
    };
    let mut point = params(&b.student);
    point.extend(params(&b.projector));
    report("L_fea", relative_error(&point, &f));
}

pub fn full_synthesis_objective_gradient(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(10);
    let plan = csd_plan();
    let weights = LossWeights {
        alpha: 10.0,
        beta: 0.0,
    };
    let f = |p: &[Tensor<f64>]| {
        let mut b = b.clone();
        let (gen, z) = p.split_at(p.len() - 1);
        set_params(&mut b.generator, gen);
        let mut g = Graph::new();
        let gv = b.generator.bind(&mut g, Binding::Trainable);
        let zv = g.param(z[0].clone());
        let terms = losses::loss_data_synthesis(
            &mut g,
            &b,
            &gv,
            zv,
            &LABELS,
            AdversarialTerm::Csd,
            Some(&plan),
            &weights,
            &KdConfig::default(),
        )
        .unwrap();
        let v = g.scalar(terms.total);
        let mut grads = g.backward(terms.total).unwrap();
        let mut out = collect_grads(&g, &mut grads, &gv.vars());
        out.push(grads.take_or_zeros(zv, z[0].shape()));
        (v, out)
    };
    report("L_DS", relative_error(&generator_point(&b), &f));
}

pub fn full_transfer_objective_gradient(report: &mut dyn FnMut(&str, f64)) {
    let b = probe_bundle::<f64>(12);
    let x0 = images(13);
    let split = params(&b.student).len();
    let weights = LossWeights {
        alpha: 0.0,
        beta: 30.0,
    };
    let f = |p: &[Tensor<f64>]| {
        let mut b = b.clone();
        set_params(&mut b.student, &p[..split]);
        set_params(&mut b.projector, &p[split..]);
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Trainable);
        let pv = b.projector.bind(&mut g, Binding::Trainable);
        let x = g.constant(x0.clone());
        let terms = losses::loss_knowledge_transfer(
            &mut g,
            &b,
            &sv,
            &pv,
            x,
            &LABELS,
            &weights,
            &KdConfig::default(),
        )
        .unwrap();
        let v = g.scalar(terms.total);
        let mut grads = g.backward(terms.total).unwrap();
        let mut out = collect_grads(&g, &mut grads, &sv.vars());
        out.extend(collect_grads(&g, &mut grads, &pv.vars()));
        (v, out)
    };
    let mut point = params(&b.student);
    point.extend(params(&b.projector));
    report("L_KT", relative_error(&point, &f));
}

pub type Check = fn(&mut dyn FnMut(&str, f64));

/// Every check, in order.
pub const ALL: &[(&str, Check)] = &[
    (
        "cls_gradient_through_generator_and_teacher",
        cls_gradient_through_generator_and_teacher,
    ),
    (
        "bns_gradient_through_teacher_hooks",
        bns_gradient_through_teacher_hooks,
    ),
    (
        "csd_gradient_for_aux_head_and_images",
        csd_gradient_for_aux_head_and_images,
    ),
    ("kd_gradient_for_student", kd_gradient_for_student),
    (
        "fea_gradient_for_student_and_projector",
        fea_gradient_for_student_and_projector,
    ),
    (
        "full_synthesis_objective_gradient",
        full_synthesis_objective_gradient,
    ),
    (
        "full_transfer_objective_gradient",
        full_transfer_objective_gradient,
    ),
];
