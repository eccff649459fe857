use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    BatchNorm, Binding, BnMode, BnVars, Conv2d, ConvVars, Linear, LinearVars, Module,
};
use crate::autograd::{BatchMoments, Graph, Var};
use crate::error::{DfkdError, Result};
use crate::tensor::{Scalar, Tensor};

/// Slope of the LeakyReLU activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    /// Channels at the reshape; the two conv blocks use `base/4` and `base/8`.
    pub base_width: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(DfkdError::Config(format!(
                "generator needs height and width divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.base_width < 8 || !self.base_width.is_multiple_of(8) {
            return Err(DfkdError::Config(format!(
                "generator base width must be a positive multiple of 8, got {}",
                self.base_width
            )));
        }
        Ok(())
    }
}

/// `z -> FC -> reshape (base, H/4, W/4) -> BN -> [up, conv3, BN, LeakyReLU] x2
/// -> conv3 to C -> Tanh -> BN`.
///
/// The trailing BN has no affine parameters.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    spec: GeneratorSpec,
    fc: Linear<T>,
    bn0: BatchNorm<T>,
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    conv_out: Conv2d<T>,
    bn_out: BatchNorm<T>,
}

#[derive(Clone, Debug)]
pub struct GeneratorVars {
    fc: LinearVars,
    bn0: BnVars,
    conv1: ConvVars,
    bn1: BnVars,
    conv2: ConvVars,
    bn2: BnVars,
    conv_out: ConvVars,
    bn_out: BnVars,
}

impl GeneratorVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.fc.push_into(&mut out);
        self.bn0.push_into(&mut out);
        self.conv1.push_into(&mut out);
        self.bn1.push_into(&mut out);
        self.conv2.push_into(&mut out);
        self.bn2.push_into(&mut out);
        self.conv_out.push_into(&mut out);
        self.bn_out.push_into(&mut out);
        out
    }
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let base = spec.base_width;
        let (h0, w0) = (spec.height / 4, spec.width / 4);
        Ok(Self {
            fc: Linear::new(spec.noise_dim, base * h0 * w0, rng),
            bn0: BatchNorm::new(base, true),
            conv1: Conv2d::new(base, base / 4, 3, 1, true, rng),
            bn1: BatchNorm::new(base / 4, true),
            conv2: Conv2d::new(base / 4, base / 8, 3, 1, true, rng),
            bn2: BatchNorm::new(base / 8, true),
            conv_out: Conv2d::new(base / 8, spec.channels, 3, 1, true, rng),
            bn_out: BatchNorm::new(spec.channels, false),
            spec,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> GeneratorVars {
        GeneratorVars {
            fc: self.fc.bind(g, binding),
            bn0: self.bn0.bind(g, binding),
            conv1: self.conv1.bind(g, binding),
            bn1: self.bn1.bind(g, binding),
            conv2: self.conv2.bind(g, binding),
            bn2: self.bn2.bind(g, binding),
            conv_out: self.conv_out.bind(g, binding),
            bn_out: self.bn_out.bind(g, binding),
        }
    }

    /// Images `(B, C, H, W)` from noise `(B, noise_dim)`.
    pub fn forward(
        &self,
        vars: &GeneratorVars,
        g: &mut Graph<T>,
        z: Var,
        mode: BnMode,
    ) -> Result<(Var, Vec<BatchMoments<T>>)> {
        let (batch, dim) = g.value(z).dims2()?;
        if dim != self.spec.noise_dim {
            return Err(DfkdError::shape(format!(
                "generator expects noise width {}, got {dim}",
                self.spec.noise_dim
            )));
        }
        let s = &self.spec;
        let (h0, w0) = (s.height / 4, s.width / 4);
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut moments = Vec::new();

        let h = Linear::forward(&vars.fc, g, z)?;
        let h = g.reshape(h, &[batch, s.base_width, h0, w0])?;
        let out = self.bn0.forward(&vars.bn0, g, h, mode)?;
        moments.extend(out.moments);

        let h = g.resize_nearest(out.y, 2 * h0, 2 * w0)?;
        let h = self.conv1.forward(&vars.conv1, g, h)?;
        let out = self.bn1.forward(&vars.bn1, g, h, mode)?;
        moments.extend(out.moments);
        let h = g.leaky_relu(out.y, slope);

        let h = g.resize_nearest(h, s.height, s.width)?;
        let h = self.conv2.forward(&vars.conv2, g, h)?;
        let out = self.bn2.forward(&vars.bn2, g, h, mode)?;
        moments.extend(out.moments);
        let h = g.leaky_relu(out.y, slope);

        let h = self.conv_out.forward(&vars.conv_out, g, h)?;
        let h = g.tanh(h);
        let out = self.bn_out.forward(&vars.bn_out, g, h, mode)?;
        moments.extend(out.moments);
        Ok((out.y, moments))
    }

    /// Images for a plain noise tensor with batch-statistic normalization.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Binding::Frozen);
        let zv = g.constant(z.clone());
        let (x, _) = self.forward(&vars, &mut g, zv, BnMode::Train)?;
        Ok(g.value(x).clone())
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.fc.visit("fc", f);
        self.bn0.visit("bn0", f);
        self.conv1.visit("conv1", f);
        self.bn1.visit("bn1", f);
        self.conv2.visit("conv2", f);
        self.bn2.visit("bn2", f);
        self.conv_out.visit("conv_out", f);
        self.bn_out.visit("bn_out", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.fc.visit_mut("fc", f);
        self.bn0.visit_mut("bn0", f);
        self.conv1.visit_mut("conv1", f);
        self.bn1.visit_mut("bn1", f);
        self.conv2.visit_mut("conv2", f);
        self.bn2.visit_mut("bn2", f);
        self.conv_out.visit_mut("conv_out", f);
        self.bn_out.visit_mut("bn_out", f);
    }

    fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.bn0.visit_buffers("bn0", f);
        self.bn1.visit_buffers("bn1", f);
        self.bn2.visit_buffers("bn2", f);
        self.bn_out.visit_buffers("bn_out", f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn0.visit_buffers_mut("bn0", f);
        self.bn1.visit_buffers_mut("bn1", f);
        self.bn2.visit_buffers_mut("bn2", f);
        self.bn_out.visit_buffers_mut("bn_out", f);
    }
}
