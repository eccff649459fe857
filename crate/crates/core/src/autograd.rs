//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that produced it. [`Graph::backward`] walks the tape
//! in reverse and returns gradients for the leaves created with
//! [`Graph::param`]. Nodes that do not depend on any parameter are never
//! visited, so frozen networks cost only their forward pass plus the
//! input-gradient path.

use crate::error::{DfkdError, Result};
use crate::kernels::{col2im, im2col, rotate_plane, swap_leading_axes, ConvGeometry};
use crate::tensor::{matmul_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Vec<T>,
    },
    GlobalAvgPool(Var),
    ResizeNearest(Var),
    Rotate {
        x: Var,
        turns: Vec<u8>,
    },
    ConcatRows(Vec<Var>),
    LogSoftmax(Var),
    Nll {
        x: Var,
        labels: Vec<usize>,
    },
    Norm2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics of one normalization site, as graph values.
#[derive(Clone, Copy, Debug)]
pub struct ChannelStats {
    pub mean: Var,
    pub var: Var,
}

/// Plain per-channel statistics of a training-mode batch-norm call, used to
/// update running estimates after the step.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// (channels, per-channel plane) view of a (B, C, ...) tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(DfkdError::shape(format!(
            "channel op needs at least (batch, channels), got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DfkdError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::from_usize(t.numel().max(1)).unwrap();
        let v = Tensor::scalar(t.sum() / n);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// `x (B, in) -> x W^T + b` with `W (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, fan_in) = self.value(x).dims2()?;
        let (fan_out, w_in) = self.value(w).dims2()?;
        if w_in != fan_in {
            return Err(DfkdError::shape(format!(
                "linear: input width {fan_in} vs weight {:?}",
                self.shape(w)
            )));
        }
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != fan_out {
                return Err(DfkdError::shape("linear: bias width"));
            }
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        matmul_into(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            beta,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let v = Tensor::new(vec![rows, fan_out], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution with square kernels, `x (B, Cin, H, W)`, `w (Cout, Cin, k, k)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let (cout, cin, kh, kw) = self.value(w).dims4()?;
        if cin != dims.1 || kh != kw {
            return Err(DfkdError::shape(format!(
                "conv2d: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let geo = ConvGeometry::new(dims, kh, stride, pad)
            .ok_or_else(|| DfkdError::shape("conv2d: kernel larger than padded input"))?;
        let cols = im2col(self.value(x).data(), &geo);
        let n = geo.col_cols();
        let mut out_m = vec![T::zero(); cout * n];
        matmul_into(
            cout,
            geo.col_rows(),
            n,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out_m,
            T::zero(),
        );
        let plane = geo.out_height * geo.out_width;
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != cout {
                return Err(DfkdError::shape("conv2d: bias width"));
            }
            for (row, &bv) in out_m.chunks_mut(n).zip(bias) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let out = swap_leading_axes(&out_m, cout, geo.batch, plane);
        let v = Tensor::new(vec![geo.batch, cout, geo.out_height, geo.out_width], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = self.rg(w).then_some(cols);
        Ok(self.push(v, Op::Conv2d { x, w, b, geo, cols }, rg))
    }

    fn channel_params(
        &self,
        gamma: Option<Var>,
        beta: Option<Var>,
        c: usize,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let read = |v: Option<Var>, fill: T| -> Result<Vec<T>> {
            match v {
                Some(v) if self.value(v).numel() != c => {
                    Err(DfkdError::shape("batch norm: affine width"))
                }
                Some(v) => Ok(self.value(v).data().to_vec()),
                None => Ok(vec![fill; c]),
            }
        };
        Ok((read(gamma, T::one())?, read(beta, T::zero())?))
    }

    /// Normalize each channel with its own batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>)> {
        let (b, c, s) = channel_layout(self.shape(x))?;
        let (g, bt) = self.channel_params(gamma, beta, c)?;
        let xd = self.value(x).data();
        let count = b * s;
        let nf = T::from_usize(count.max(1)).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * s..][..s];
                mean[ci] = mean[ci] + plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * s..][..s];
                let m = mean[ci];
                var[ci] = var[ci] + plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for k in off..off + s {
                    let h = (xd[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = h;
                    y[k] = h * g[ci] + bt[ci];
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg =
            self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        let moments = BatchMoments { mean, var, count };
        let out = self.push(
            v,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, moments))
    }

    /// Normalize each channel with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (b, c, s) = channel_layout(self.shape(x))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(DfkdError::shape("batch norm: running statistics width"));
        }
        let (g, bt) = self.channel_params(gamma, beta, c)?;
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let xd = self.value(x).data();
        let mut y = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let scale = inv_std[ci] * g[ci];
                let shift = bt[ci] - running_mean[ci] * scale;
                for k in off..off + s {
                    y[k] = xd[k] * scale + shift;
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), y)?;
        let rg =
            self.rg(x) || gamma.is_some_and(|v| self.rg(v)) || beta.is_some_and(|v| self.rg(v));
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Per-channel mean over batch and spatial positions, shape `(C)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_layout(self.shape(x))?;
        let xd = self.value(x).data();
        let nf = T::from_usize((b * s).max(1)).unwrap();
        let mut mean = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                mean[ci] = mean[ci] + xd[(bi * c + ci) * s..][..s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], mean)?, Op::ChannelMean(x), rg))
    }

    /// Per-channel biased variance over batch and spatial positions, shape `(C)`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_layout(self.shape(x))?;
        let xd = self.value(x).data();
        let nf = T::from_usize((b * s).max(1)).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                mean[ci] = mean[ci] + xd[(bi * c + ci) * s..][..s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        for bi in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] = var[ci]
                    + xd[(bi * c + ci) * s..][..s]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nf);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c], var)?, Op::ChannelVar { x, mean }, rg))
    }

    pub fn channel_stats(&mut self, x: Var) -> Result<ChannelStats> {
        Ok(ChannelStats {
            mean: self.channel_mean(x)?,
            var: self.channel_var(x)?,
        })
    }

    /// `(B, C, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let s = h * w;
        let nf = T::from_usize(s.max(1)).unwrap();
        let xd = self.value(x).data();
        let out: Vec<T> = (0..b * c)
            .map(|i| xd[i * s..(i + 1) * s].iter().copied().sum::<T>() / nf)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(x), rg))
    }

    /// Nearest-neighbour resize of the spatial axes.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &xd[p * h * w..][..h * w];
            let dst = &mut out[p * out_h * out_w..][..out_h * out_w];
            for oy in 0..out_h {
                let iy = oy * h / out_h;
                for ox in 0..out_w {
                    dst[oy * out_w + ox] = src[iy * w + ox * w / out_w];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, c, out_h, out_w], out)?,
            Op::ResizeNearest(x),
            rg,
        ))
    }

    /// Rotate image `i` of the batch clockwise by `turns[i]` quarter turns.
    pub fn rotate(&mut self, x: Var, turns: &[u8]) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if turns.len() != b {
            return Err(DfkdError::shape(format!(
                "rotate: {} turn entries for batch of {b}",
                turns.len()
            )));
        }
        if let Some(&t) = turns.iter().find(|&&t| t % 2 == 1 && h != w) {
            return Err(DfkdError::NonSquare {
                height: h,
                width: w,
                quarter_turns: t,
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let s = h * w;
        for (bi, &t) in turns.iter().enumerate() {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                rotate_plane(&xd[off..off + s], &mut out[off..off + s], h, w, t);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, c, h, w], out)?,
            Op::Rotate {
                x,
                turns: turns.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-wise log-softmax of a `(B, K)` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(log_probs).dims2()?;
        if labels.len() != rows {
            return Err(DfkdError::shape(format!(
                "nll: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= cols) {
            return Err(DfkdError::LabelOutOfRange {
                label,
                classes: cols,
            });
        }
        let xd = self.value(log_probs).data();
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| xd[r * cols + l])
            .sum();
        let v = Tensor::scalar(-total / T::from_usize(rows.max(1)).unwrap());
        let rg = self.rg(log_probs);
        Ok(self.push(
            v,
            Op::Nll {
                x: log_probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean norm over all elements. The subgradient at zero is zero.
    pub fn norm2(&mut self, x: Var) -> Var {
        let n = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt();
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::Norm2(x), rg)
    }

    /// Gradients of scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(DfkdError::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, gy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, gy.clone());
                self.accumulate(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, gy.map(|v| -v));
                self.accumulate(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, gy.zip_map(val(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gy.zip_map(val(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gy.map(|g| g * c));
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                self.accumulate(grads, *a, gy.zip_map(val(*a), |g, x| g * two * x));
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, gy.zip_map(&node.value, |g, y| g * y));
            }
            Op::Sum(a) => {
                let g = gy.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), g));
            }
            Op::Mean(a) => {
                let n = T::from_usize(val(*a).numel().max(1)).unwrap();
                let g = gy.item() / n;
                self.accumulate(grads, *a, Tensor::full(val(*a).shape().to_vec(), g));
            }
            Op::Relu(a) => {
                let g = gy.zip_map(
                    &node.value,
                    |g, y| if y > T::zero() { g } else { T::zero() },
                );
                self.accumulate(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let g = gy.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * slope });
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = gy.zip_map(&node.value, |g, y| g * (T::one() - y * y));
                self.accumulate(grads, *a, g);
            }
            Op::Reshape(a) => {
                let g = gy.reshape(val(*a).shape().to_vec())?;
                self.accumulate(grads, *a, g);
            }
            Op::Linear { x, w, b } => {
                let (rows, fan_in) = val(*x).dims2()?;
                let fan_out = val(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * fan_in];
                    matmul_into(
                        rows,
                        fan_out,
                        fan_in,
                        gy.data(),
                        false,
                        val(*w).data(),
                        false,
                        &mut dx,
                        T::zero(),
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![rows, fan_in], dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    matmul_into(
                        fan_out,
                        rows,
                        fan_in,
                        gy.data(),
                        true,
                        val(*x).data(),
                        false,
                        &mut dw,
                        T::zero(),
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![fan_out, fan_in], dw)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = vec![T::zero(); fan_out];
                    for row in gy.data().chunks(fan_out) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vec![fan_out], db)?);
                }
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let cout = val(*w).shape()[0];
                let plane = geo.out_height * geo.out_width;
                let n = geo.col_cols();
                let k = geo.col_rows();
                let gym = swap_leading_axes(gy.data(), geo.batch, cout, plane);
                if self.rg(*w) {
                    let cols = cols.as_ref().expect("columns kept for trainable weights");
                    let mut dw = vec![T::zero(); cout * k];
                    matmul_into(cout, n, k, &gym, false, cols, true, &mut dw, T::zero());
                    self.accumulate(grads, *w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let db: Vec<T> = gym.chunks(n).map(|r| r.iter().copied().sum()).collect();
                    self.accumulate(grads, b, Tensor::new(vec![cout], db)?);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); k * n];
                    matmul_into(
                        k,
                        cout,
                        n,
                        val(*w).data(),
                        true,
                        &gym,
                        false,
                        &mut dcols,
                        T::zero(),
                    );
                    let dx = col2im(&dcols, geo);
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, s) = channel_layout(val(*x).shape())?;
                let gd = gy.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        for k in off..off + s {
                            sum_dy[ci] = sum_dy[ci] + gd[k];
                            sum_dy_xhat[ci] = sum_dy_xhat[ci] + gd[k] * xhat[k];
                        }
                    }
                }
                if let Some(gm) = gamma.filter(|v| self.rg(*v)) {
                    self.accumulate(grads, gm, Tensor::new(vec![c], sum_dy_xhat.clone())?);
                }
                if let Some(bt) = beta.filter(|v| self.rg(*v)) {
                    self.accumulate(grads, bt, Tensor::new(vec![c], sum_dy.clone())?);
                }
                if self.rg(*x) {
                    let g: Vec<T> = match gamma {
                        Some(gm) => val(*gm).data().to_vec(),
                        None => vec![T::one(); c],
                    };
                    let nf = T::from_usize((b * s).max(1)).unwrap();
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            let coef = g[ci] * inv_std[ci] / nf;
                            for k in off..off + s {
                                dx[k] =
                                    coef * (nf * gd[k] - sum_dy[ci] - xhat[k] * sum_dy_xhat[ci]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (b, c, s) = channel_layout(val(*x).shape())?;
                let gd = gy.data();
                let xd = val(*x).data();
                if let Some(gm) = gamma.filter(|v| self.rg(*v)) {
                    let mut dg = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for k in off..off + s {
                                dg[ci] = dg[ci] + gd[k] * (xd[k] - mean[ci]) * inv_std[ci];
                            }
                        }
                    }
                    self.accumulate(grads, gm, Tensor::new(vec![c], dg)?);
                }
                if let Some(bt) = beta.filter(|v| self.rg(*v)) {
                    let mut db = vec![T::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            db[ci] =
                                db[ci] + gd[(bi * c + ci) * s..][..s].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, bt, Tensor::new(vec![c], db)?);
                }
                if self.rg(*x) {
                    let g: Vec<T> = match gamma {
                        Some(gm) => val(*gm).data().to_vec(),
                        None => vec![T::one(); c],
                    };
                    let mut dx = vec![T::zero(); gd.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            let scale = g[ci] * inv_std[ci];
                            for k in off..off + s {
                                dx[k] = gd[k] * scale;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                }
            }
            Op::ChannelMean(x) => {
                let (b, c, s) = channel_layout(val(*x).shape())?;
                let nf = T::from_usize((b * s).max(1)).unwrap();
                let gd = gy.data();
                let mut dx = vec![T::zero(); b * c * s];
                for bi in 0..b {
                    for ci in 0..c {
                        let g = gd[ci] / nf;
                        dx[(bi * c + ci) * s..][..s].iter_mut().for_each(|d| *d = g);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
            }
            Op::ChannelVar { x, mean } => {
                let (b, c, s) = channel_layout(val(*x).shape())?;
                let nf = T::from_usize((b * s).max(1)).unwrap();
                let two = T::one() + T::one();
                let gd = gy.data();
                let xd = val(*x).data();
                let mut dx = vec![T::zero(); b * c * s];
                for bi in 0..b {
                    for ci in 0..c {
                        let coef = two * gd[ci] / nf;
                        let off = (bi * c + ci) * s;
                        for k in off..off + s {
                            dx[k] = coef * (xd[k] - mean[ci]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let (b, c, h, w) = val(*x).dims4()?;
                let s = h * w;
                let nf = T::from_usize(s.max(1)).unwrap();
                let mut dx = vec![T::zero(); b * c * s];
                for (p, &g) in gy.data().iter().enumerate() {
                    dx[p * s..(p + 1) * s].iter_mut().for_each(|d| *d = g / nf);
                }
                self.accumulate(grads, *x, Tensor::new(vec![b, c, h, w], dx)?);
            }
            Op::ResizeNearest(x) => {
                let (b, c, h, w) = val(*x).dims4()?;
                let (_, _, out_h, out_w) = gy.dims4()?;
                let gd = gy.data();
                let mut dx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    let src = &gd[p * out_h * out_w..][..out_h * out_w];
                    let dst = &mut dx[p * h * w..][..h * w];
                    for oy in 0..out_h {
                        let iy = oy * h / out_h;
                        for ox in 0..out_w {
                            let ix = ox * w / out_w;
                            dst[iy * w + ix] = dst[iy * w + ix] + src[oy * out_w + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![b, c, h, w], dx)?);
            }
            Op::Rotate { x, turns } => {
                let (b, c, h, w) = val(*x).dims4()?;
                let s = h * w;
                let gd = gy.data();
                let mut dx = vec![T::zero(); gd.len()];
                for (bi, &t) in turns.iter().enumerate().take(b) {
                    let inverse = (4 - t % 4) % 4;
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        rotate_plane(&gd[off..off + s], &mut dx[off..off + s], h, w, inverse);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![b, c, h, w], dx)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).shape()[0];
                    if self.rg(p) {
                        let g = gy.slice_rows(start, start + rows)?;
                        self.accumulate(grads, p, g);
                    }
                    start += rows;
                }
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = node.value.dims2()?;
                let yd = node.value.data();
                let gd = gy.data();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let g = &gd[r * cols..(r + 1) * cols];
                    let total: T = g.iter().copied().sum();
                    for j in 0..cols {
                        dx[r * cols + j] = g[j] - yd[r * cols + j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], dx)?);
            }
            Op::Nll { x, labels } => {
                let (rows, cols) = val(*x).dims2()?;
                let g = gy.item() / T::from_usize(rows.max(1)).unwrap();
                let mut dx = vec![T::zero(); rows * cols];
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * cols + l] = -g;
                }
                self.accumulate(grads, *x, Tensor::new(vec![rows, cols], dx)?);
            }
            Op::Norm2(x) => {
                let n = node.value.item();
                let g = gy.item();
                let dx = if n > T::zero() {
                    val(*x).map(|v| g * v / n)
                } else {
                    Tensor::zeros(val(*x).shape().to_vec())
                };
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.take(v)
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}
