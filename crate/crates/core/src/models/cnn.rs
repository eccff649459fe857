use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    BatchNorm, Binding, BnMode, BnVars, Conv2d, ConvVars, Linear, LinearVars, Module,
};
use crate::autograd::{BatchMoments, ChannelStats, Graph, Var};
use crate::error::{DfkdError, Result};
use crate::tensor::{Scalar, Tensor};

/// Architecture descriptor of a conv-BN-ReLU stack with a global-pool head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub name: String,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub classes: usize,
}

impl CnnSpec {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    /// `(C, H, W)` of the last convolutional feature map.
    pub fn feature_map_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.strides {
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
        }
        (self.feature_dim(), h, w)
    }
}

/// Conv-BN-ReLU blocks, global average pooling, linear head.
///
/// The feature extractor is everything up to the pooled `d`-vector; the
/// classifier is the linear head.
#[derive(Clone, Debug)]
pub struct TinyCnn<T> {
    spec: CnnSpec,
    convs: Vec<Conv2d<T>>,
    bns: Vec<BatchNorm<T>>,
    head: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct CnnVars {
    convs: Vec<ConvVars>,
    bns: Vec<BnVars>,
    head: LinearVars,
}

impl CnnVars {
    /// Parameter vars in [`Module::visit_params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (c, b) in self.convs.iter().zip(&self.bns) {
            c.push_into(&mut out);
            b.push_into(&mut out);
        }
        self.head.push_into(&mut out);
        out
    }
}

pub struct CnnOutput<T> {
    pub logits: Var,
    /// Pooled feature vector `(B, d)`.
    pub features: Var,
    /// Last convolutional feature map `(B, C, H, W)`.
    pub feature_map: Var,
    /// Batch statistics of every BN input; filled only in [`BnMode::EvalCapture`].
    pub bn_stats: Vec<ChannelStats>,
    /// Batch moments for running-statistic updates; filled only in [`BnMode::Train`].
    pub moments: Vec<BatchMoments<T>>,
}

impl<T: Scalar> TinyCnn<T> {
    pub fn new<R: Rng + ?Sized>(spec: CnnSpec, rng: &mut R) -> Result<Self> {
        if spec.widths.is_empty() || spec.widths.len() != spec.strides.len() {
            return Err(DfkdError::Config(format!(
                "architecture `{}` needs one stride per block",
                spec.name
            )));
        }
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = spec.in_channels;
        for (&w, &s) in spec.widths.iter().zip(&spec.strides) {
            convs.push(Conv2d::new(cin, w, 3, s, false, rng));
            bns.push(BatchNorm::new(w, true));
            cin = w;
        }
        let head = Linear::new(cin, spec.classes, rng);
        Ok(Self {
            spec,
            convs,
            bns,
            head,
        })
    }

    pub fn spec(&self) -> &CnnSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn bn_layers(&self) -> &[BatchNorm<T>] {
        &self.bns
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> CnnVars {
        CnnVars {
            convs: self.convs.iter().map(|c| c.bind(g, binding)).collect(),
            bns: self.bns.iter().map(|b| b.bind(g, binding)).collect(),
            head: self.head.bind(g, binding),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = [self.spec.in_channels, self.spec.height, self.spec.width];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(DfkdError::shape(format!(
                "`{}` expects (B, {}, {}, {}), got {shape:?}",
                self.spec.name, expected[0], expected[1], expected[2]
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        vars: &CnnVars,
        g: &mut Graph<T>,
        x: Var,
        mode: BnMode,
    ) -> Result<CnnOutput<T>> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        let mut bn_stats = Vec::new();
        let mut moments = Vec::new();
        for ((conv, cv), (bn, bv)) in self
            .convs
            .iter()
            .zip(&vars.convs)
            .zip(self.bns.iter().zip(&vars.bns))
        {
            let c = conv.forward(cv, g, h)?;
            let out = bn.forward(bv, g, c, mode)?;
            bn_stats.extend(out.captured);
            moments.extend(out.moments);
            h = g.relu(out.y);
        }
        let feature_map = h;
        let features = g.global_avg_pool(feature_map)?;
        let logits = Linear::forward(&vars.head, g, features)?;
        Ok(CnnOutput {
            logits,
            features,
            feature_map,
            bn_stats,
            moments,
        })
    }

    pub fn commit_moments(&mut self, moments: &[BatchMoments<T>]) {
        for (bn, m) in self.bns.iter_mut().zip(moments) {
            bn.update_running(m);
        }
    }

    /// Inference-mode logits for a whole image tensor, in chunks.
    pub fn predict_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, ..) = images.dims4()?;
        let mut parts = Vec::new();
        let chunk = 500;
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut g = Graph::new();
            let vars = self.bind(&mut g, Binding::Frozen);
            let x = g.constant(images.slice_rows(start, end)?);
            let out = self.forward(&vars, &mut g, x, BnMode::Eval)?;
            parts.push(g.value(out.logits).clone());
        }
        if parts.is_empty() {
            return Tensor::new(vec![0, self.spec.classes], Vec::new());
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

impl<T: Scalar> Module<T> for TinyCnn<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, (c, b)) in self.convs.iter().zip(&self.bns).enumerate() {
            c.visit(&format!("block{i}.conv"), f);
            b.visit(&format!("block{i}.bn"), f);
        }
        self.head.visit("head", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, (c, b)) in self.convs.iter_mut().zip(&mut self.bns).enumerate() {
            c.visit_mut(&format!("block{i}.conv"), f);
            b.visit_mut(&format!("block{i}.bn"), f);
        }
        self.head.visit_mut("head", f);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, b) in self.bns.iter().enumerate() {
            b.visit_buffers(&format!("block{i}.bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.visit_buffers_mut(&format!("block{i}.bn"), f);
        }
    }
}

/// The frozen, pretrained network. No mutable access is exposed, so its
/// parameters and running statistics cannot change during distillation.
#[derive(Clone, Debug)]
pub struct TeacherModel<T> {
    net: TinyCnn<T>,
}

impl<T: Scalar> TeacherModel<T> {
    pub fn new(net: TinyCnn<T>) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &TinyCnn<T> {
        &self.net
    }

    pub fn into_net(self) -> TinyCnn<T> {
        self.net
    }

    pub fn bind(&self, g: &mut Graph<T>) -> CnnVars {
        self.net.bind(g, Binding::Frozen)
    }

    /// Inference-mode forward that also exposes, per BN layer, the
    /// differentiable batch mean and biased variance of the layer input.
    pub fn forward_with_hooks(
        &self,
        vars: &CnnVars,
        g: &mut Graph<T>,
        x: Var,
    ) -> Result<CnnOutput<T>> {
        self.net.forward(vars, g, x, BnMode::EvalCapture)
    }

    pub fn forward(&self, vars: &CnnVars, g: &mut Graph<T>, x: Var) -> Result<CnnOutput<T>> {
        self.net.forward(vars, g, x, BnMode::Eval)
    }

    /// `(running_mean, running_var)` of every BN layer, in forward order.
    pub fn running_stats(&self) -> Vec<(&Tensor<T>, &Tensor<T>)> {
        self.net
            .bn_layers()
            .iter()
            .map(|b| (&b.running_mean, &b.running_var))
            .collect()
    }
}

impl<T: Scalar> Module<T> for TeacherModel<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.net.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.net.visit_params_mut(f)
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.net.visit_buffers(f)
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.net.visit_buffers_mut(f)
    }
}

/// The trainable student `S = h(Phi(x))`.
#[derive(Clone, Debug)]
pub struct StudentModel<T> {
    net: TinyCnn<T>,
}

impl<T: Scalar> StudentModel<T> {
    pub fn new(net: TinyCnn<T>) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &TinyCnn<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut TinyCnn<T> {
        &mut self.net
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> CnnVars {
        self.net.bind(g, binding)
    }

    pub fn forward(
        &self,
        vars: &CnnVars,
        g: &mut Graph<T>,
        x: Var,
        mode: BnMode,
    ) -> Result<CnnOutput<T>> {
        self.net.forward(vars, g, x, mode)
    }

    /// Inference-mode forward; the student exposes no BN statistics.
    pub fn forward_with_hooks(
        &self,
        vars: &CnnVars,
        g: &mut Graph<T>,
        x: Var,
    ) -> Result<CnnOutput<T>> {
        self.net.forward(vars, g, x, BnMode::Eval)
    }
}

impl<T: Scalar> Module<T> for StudentModel<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.net.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.net.visit_params_mut(f)
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.net.visit_buffers(f)
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.net.visit_buffers_mut(f)
    }
}
