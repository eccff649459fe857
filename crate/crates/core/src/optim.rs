//! First-order optimizers and the cosine learning-rate schedule.
//!
//! Parameters are addressed by slot index: the position of the tensor in a
//! module's [`Module::visit_params`] order, offset when several modules (or
//! extra tensors such as the noise batch) share one optimizer.

use crate::autograd::{Grads, Graph, Var};
use crate::error::{DfkdError, Result};
use crate::models::Module;
use crate::tensor::{Scalar, Tensor};

pub trait Optimizer<T: Scalar> {
    /// Call once before the updates of one step.
    fn begin_step(&mut self);
    fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>);
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

/// Gradients of `vars`, zeros where a var received none.
pub fn collect_grads<T: Scalar>(
    g: &Graph<T>,
    grads: &mut Grads<T>,
    vars: &[Var],
) -> Vec<Tensor<T>> {
    vars.iter()
        .map(|&v| grads.take_or_zeros(v, g.shape(v)))
        .collect()
}

/// Applies `grads` (in visit order) to `module`, starting at `first_slot`.
/// Returns the slot after the last one used.
pub fn apply_to_module<T: Scalar, O: Optimizer<T> + ?Sized, M: Module<T> + ?Sized>(
    opt: &mut O,
    first_slot: usize,
    module: &mut M,
    grads: &[Tensor<T>],
) -> Result<usize> {
    let mut i = 0;
    let mut mismatch = None;
    module.visit_params_mut(&mut |name, p| {
        match grads.get(i) {
            Some(gr) if gr.shape() == p.shape() => opt.update(first_slot + i, p, gr),
            Some(gr) => {
                mismatch.get_or_insert(format!(
                    "{name}: grad {:?} vs param {:?}",
                    gr.shape(),
                    p.shape()
                ));
            }
            None => {
                mismatch.get_or_insert(format!("{name}: no gradient supplied"));
            }
        }
        i += 1;
    });
    if let Some(m) = mismatch {
        return Err(DfkdError::shape(m));
    }
    if i != grads.len() {
        return Err(DfkdError::shape(format!(
            "{} gradients for {i} parameters",
            grads.len()
        )));
    }
    Ok(first_slot + i)
}

fn ensure_slot<T: Scalar>(buffers: &mut Vec<Vec<T>>, slot: usize, len: usize) -> &mut Vec<T> {
    if buffers.len() <= slot {
        buffers.resize_with(slot + 1, Vec::new);
    }
    let b = &mut buffers[slot];
    if b.len() != len {
        *b = vec![T::zero(); len];
    }
    b
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) {
        let n = param.numel();
        let t = self.step.max(1) as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        ensure_slot(&mut self.m, slot, n);
        ensure_slot(&mut self.v, slot, n);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for (((p, &g), mi), vi) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// SGD with heavy-ball momentum and L2 weight decay added to the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Momentum buffers as tensors, for checkpointing.
    pub fn state(&self) -> Vec<Tensor<T>> {
        self.buffers
            .iter()
            .map(|b| Tensor::new(vec![b.len()], b.clone()).expect("flat buffer"))
            .collect()
    }

    pub fn load_state(&mut self, state: Vec<Tensor<T>>) {
        self.buffers = state.into_iter().map(Tensor::into_data).collect();
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn begin_step(&mut self) {}

    fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) {
        let n = param.numel();
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(self.lr);
        let buf = ensure_slot(&mut self.buffers, slot, n);
        for ((p, &g), b) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(buf.iter_mut())
        {
            let d = g + wd * *p;
            *b = mu * *b + d;
            *p = *p - lr * *b;
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`, clamped to `step <= total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let s = step.min(total) as f64;
    base * (1.0 + (std::f64::consts::PI * s / total as f64).cos()) / 2.0
}
