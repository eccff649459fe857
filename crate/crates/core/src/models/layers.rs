use rand::Rng;

use crate::autograd::{BatchMoments, ChannelStats, Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Visits parameters (trainable) and buffers (running statistics) in a
/// fixed order. Binding, checkpointing, optimizers and hashing all rely on
/// that order being stable.
pub trait Module<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn visit_buffers<'a>(&'a self, _f: &mut dyn FnMut(&str, &'a Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// How a module's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

pub(crate) fn bind_tensor<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>, binding: Binding) -> Var {
    match binding {
        Binding::Trainable => g.param(t.clone()),
        Binding::Frozen => g.constant(t.clone()),
    }
}

fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    /// Uniform init with bound `1/sqrt(fan_in)` for weight and bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform([fan_out, fan_in], bound, rng),
            bias: Tensor::uniform([fan_out], bound, rng),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> LinearVars {
        LinearVars {
            weight: bind_tensor(g, &self.weight, binding),
            bias: bind_tensor(g, &self.bias, binding),
        }
    }

    pub fn forward(vars: &LinearVars, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, vars.weight, Some(vars.bias))
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&prefixed(prefix, "weight"), &self.weight);
        f(&prefixed(prefix, "bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&prefixed(prefix, "weight"), &mut self.weight);
        f(&prefixed(prefix, "bias"), &mut self.bias);
    }
}

impl LinearVars {
    pub(crate) fn push_into(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform([out_channels, in_channels, kernel, kernel], bound, rng),
            bias: with_bias.then(|| Tensor::uniform([out_channels], bound, rng)),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> ConvVars {
        ConvVars {
            weight: bind_tensor(g, &self.weight, binding),
            bias: self.bias.as_ref().map(|b| bind_tensor(g, b, binding)),
        }
    }

    pub fn forward(&self, vars: &ConvVars, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, vars.weight, vars.bias, self.stride, self.pad)
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        f(&prefixed(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&prefixed(prefix, "bias"), b);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&prefixed(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&prefixed(prefix, "bias"), b);
        }
    }
}

impl ConvVars {
    pub(crate) fn push_into(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        if let Some(b) = self.bias {
            out.push(b);
        }
    }
}

/// Normalization behaviour of a batch-norm layer for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for a running update.
    Train,
    /// Normalize with running statistics.
    Eval,
    /// Normalize with running statistics and also expose the batch
    /// statistics of the layer input as differentiable values.
    EvalCapture,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BnVars {
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

pub struct BnOutput<T> {
    pub y: Var,
    pub moments: Option<BatchMoments<T>>,
    pub captured: Option<ChannelStats>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            gamma: affine.then(|| Tensor::full([channels], T::one())),
            beta: affine.then(|| Tensor::zeros([channels])),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> BnVars {
        BnVars {
            gamma: self.gamma.as_ref().map(|t| bind_tensor(g, t, binding)),
            beta: self.beta.as_ref().map(|t| bind_tensor(g, t, binding)),
        }
    }

    pub fn forward(
        &self,
        vars: &BnVars,
        g: &mut Graph<T>,
        x: Var,
        mode: BnMode,
    ) -> Result<BnOutput<T>> {
        let eps = T::from_f64_lossy(BN_EPS);
        match mode {
            BnMode::Train => {
                let (y, moments) = g.batch_norm_train(x, vars.gamma, vars.beta, eps)?;
                Ok(BnOutput {
                    y,
                    moments: Some(moments),
                    captured: None,
                })
            }
            BnMode::Eval | BnMode::EvalCapture => {
                let captured = if mode == BnMode::EvalCapture {
                    Some(g.channel_stats(x)?)
                } else {
                    None
                };
                let y = g.batch_norm_eval(
                    x,
                    vars.gamma,
                    vars.beta,
                    self.running_mean.data(),
                    self.running_var.data(),
                    eps,
                )?;
                Ok(BnOutput {
                    y,
                    moments: None,
                    captured,
                })
            }
        }
    }

    /// Exponential running update; the variance estimate is unbiased.
    pub fn update_running(&mut self, moments: &BatchMoments<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        let n = moments.count;
        let correction = if n > 1 {
            T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
            *r = keep * *r + m * b * correction;
        }
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        if let Some(t) = &self.gamma {
            f(&prefixed(prefix, "gamma"), t);
        }
        if let Some(t) = &self.beta {
            f(&prefixed(prefix, "beta"), t);
        }
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(t) = &mut self.gamma {
            f(&prefixed(prefix, "gamma"), t);
        }
        if let Some(t) = &mut self.beta {
            f(&prefixed(prefix, "beta"), t);
        }
    }

    pub(crate) fn visit_buffers<'a>(
        &'a self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &'a Tensor<T>),
    ) {
        f(&prefixed(prefix, "running_mean"), &self.running_mean);
        f(&prefixed(prefix, "running_var"), &self.running_var);
    }

    pub(crate) fn visit_buffers_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Tensor<T>),
    ) {
        f(&prefixed(prefix, "running_mean"), &mut self.running_mean);
        f(&prefixed(prefix, "running_var"), &mut self.running_var);
    }
}

impl BnVars {
    pub(crate) fn push_into(&self, out: &mut Vec<Var>) {
        out.extend(self.gamma);
        out.extend(self.beta);
    }
}
