//! Small heads attached to the student: the auxiliary classifier for the
//! joint class-and-rotation task and the feature-map projector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Binding, Conv2d, ConvVars, Linear, LinearVars, Module};
use crate::autograd::{Graph, Var};
use crate::error::{DfkdError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSpec {
    pub input_dim: usize,
    pub outputs: usize,
    /// Number of fully-connected layers, 1 to 3.
    pub depth: usize,
}

/// `c: R^d -> R^K`, a stack of `depth` linear layers with ReLU in between.
/// Hidden layers keep width `d`.
#[derive(Clone, Debug)]
pub struct AuxClassifier<T> {
    spec: AuxSpec,
    layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug)]
pub struct AuxVars {
    layers: Vec<LinearVars>,
}

impl AuxVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.push_into(&mut out);
        }
        out
    }
}

impl<T: Scalar> AuxClassifier<T> {
    pub fn new<R: Rng + ?Sized>(spec: AuxSpec, rng: &mut R) -> Result<Self> {
        if !(1..=3).contains(&spec.depth) {
            return Err(DfkdError::Config(format!(
                "auxiliary classifier depth must be 1..=3, got {}",
                spec.depth
            )));
        }
        let layers = (0..spec.depth)
            .map(|i| {
                let out = if i + 1 == spec.depth {
                    spec.outputs
                } else {
                    spec.input_dim
                };
                Linear::new(spec.input_dim, out, rng)
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &AuxSpec {
        &self.spec
    }

    pub fn outputs(&self) -> usize {
        self.spec.outputs
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> AuxVars {
        AuxVars {
            layers: self.layers.iter().map(|l| l.bind(g, binding)).collect(),
        }
    }

    pub fn forward(&self, vars: &AuxVars, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let mut h = features;
        for (i, lv) in vars.layers.iter().enumerate() {
            h = Linear::forward(lv, g, h)?;
            if i + 1 < vars.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for AuxClassifier<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("fc{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("fc{i}"), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// `r`: a 1x1 convolution from student to teacher channels, followed by a
/// nearest-neighbour resize when the spatial sizes differ.
#[derive(Clone, Debug)]
pub struct Projector<T> {
    spec: ProjectorSpec,
    conv: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct ProjectorVars {
    conv: ConvVars,
}

impl ProjectorVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.conv.push_into(&mut out);
        out
    }
}

impl<T: Scalar> Projector<T> {
    pub fn new<R: Rng + ?Sized>(spec: ProjectorSpec, rng: &mut R) -> Self {
        let conv = Conv2d::new(spec.in_channels, spec.out_channels, 1, 1, true, rng);
        Self { spec, conv }
    }

    /// The identity map on `channels`-channel maps of the given size.
    pub fn identity(channels: usize, height: usize, width: usize) -> Self {
        let mut w = Tensor::zeros([channels, channels, 1, 1]);
        for c in 0..channels {
            w.data_mut()[c * channels + c] = T::one();
        }
        Self {
            spec: ProjectorSpec {
                in_channels: channels,
                out_channels: channels,
                out_height: height,
                out_width: width,
            },
            conv: Conv2d {
                weight: w,
                bias: Some(Tensor::zeros([channels])),
                stride: 1,
                pad: 0,
            },
        }
    }

    pub fn spec(&self) -> &ProjectorSpec {
        &self.spec
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> ProjectorVars {
        ProjectorVars {
            conv: self.conv.bind(g, binding),
        }
    }

    pub fn forward(&self, vars: &ProjectorVars, g: &mut Graph<T>, student_map: Var) -> Result<Var> {
        let h = self.conv.forward(&vars.conv, g, student_map)?;
        let (_, _, height, width) = g.value(h).dims4()?;
        if (height, width) == (self.spec.out_height, self.spec.out_width) {
            Ok(h)
        } else {
            g.resize_nearest(h, self.spec.out_height, self.spec.out_width)
        }
    }
}

impl<T: Scalar> Module<T> for Projector<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor<T>)) {
        self.conv.visit("conv", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_mut("conv", f);
    }
}
