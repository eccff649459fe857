//! Finite-difference checks of every loss gradient on probe networks, in f64
//! and once in f32.

mod common;

use common::gradcheck::{self, images, Check, LABELS, TOL};
use common::{params, probe_bundle, set_params};
use dfkd::autograd::Graph;
use dfkd::losses::{self, KdConfig, LossWeights};
use dfkd::models::Binding;
use dfkd::optim::collect_grads;
use dfkd::Tensor;

fn check(f: Check) {
    f(&mut |name, err| {
        assert!(
            err < TOL,
            "{name}: relative gradient error {err:.3e} >= {TOL:.0e}"
        )
    });
}

#[test]
fn cls_gradient_through_generator_and_teacher() {
    check(gradcheck::cls_gradient_through_generator_and_teacher);
}

#[test]
fn bns_gradient_through_teacher_hooks() {
    check(gradcheck::bns_gradient_through_teacher_hooks);
}

#[test]
fn csd_gradient_for_aux_head_and_images() {
    check(gradcheck::csd_gradient_for_aux_head_and_images);
}

#[test]
fn kd_gradient_for_student() {
    check(gradcheck::kd_gradient_for_student);
}

#[test]
fn fea_gradient_for_student_and_projector() {
    check(gradcheck::fea_gradient_for_student_and_projector);
}

#[test]
fn full_synthesis_objective_gradient() {
    check(gradcheck::full_synthesis_objective_gradient);
}

#[test]
fn full_transfer_objective_gradient() {
    check(gradcheck::full_transfer_objective_gradient);
}

/// The same check at 32-bit precision with a looser bound.
#[test]
fn transfer_gradient_in_f32() {
    const H32: f32 = 1e-3;
    let b = probe_bundle::<f32>(14);
    let x0: Tensor<f32> = images(15).cast();
    let split = params(&b.student).len();
    let f = |p: &[Tensor<f32>]| {
        let mut b = b.clone();
        set_params(&mut b.student, &p[..split]);
        set_params(&mut b.projector, &p[split..]);
        let mut g = Graph::new();
        let sv = b.student.bind(&mut g, Binding::Trainable);
        let pv = b.projector.bind(&mut g, Binding::Trainable);
        let x = g.constant(x0.clone());
        let weights = LossWeights {
            alpha: 0.0,
            beta: 30.0,
        };
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
    let (_, analytic) = f(&point);
    let (mut diff, mut an, mut nu) = (0.0f64, 0.0f64, 0.0f64);
    let mut p = point.clone();
    for (i, t) in point.iter().enumerate() {
        for j in 0..t.numel() {
            let x = t.data()[j];
            p[i].data_mut()[j] = x + H32;
            let up = f(&p).0 as f64;
            p[i].data_mut()[j] = x - H32;
            let down = f(&p).0 as f64;
            p[i].data_mut()[j] = x;
            let n = (up - down) / (2.0 * H32 as f64);
            let a = analytic[i].data()[j] as f64;
            diff += (a - n).powi(2);
            an += a * a;
            nu += n * n;
        }
    }
    let err = diff.sqrt() / an.sqrt().max(nu.sqrt());
    assert!(err < 1e-2, "f32 relative gradient error {err:.3e}");
}
