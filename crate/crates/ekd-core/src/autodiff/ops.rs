//! Forward operations and their gradient rules.
//!
//! `conv2d` is deliberately a composition of `im2col`, `matmul`, `reshape`
//! and `permute`, so convolution gradients reuse the same tested paths as
//! everything else.

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{accumulate, accumulate_owned, BatchNormCtx, Op, Tape, Var};
use crate::error::{EkdError, Result};
use crate::tensor::{Scalar, Tensor};

/// (outer, len, inner) decomposition of `shape` around `axis`: element
/// `(o, j, i)` lives at linear index `(o * len + j) * inner + i`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Per-channel mean and biased variance of an NCHW tensor, reduced over
/// batch and spatial dimensions.
pub fn bn_batch_stats<E: Scalar>(x: &Tensor<E>) -> Result<(Vec<E>, Vec<E>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(EkdError::shape(
            "batch_norm2d",
            format!("expected NCHW input, got {shape:?}"),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let spatial = h * w;
    let count = E::from_f64c((n * spatial) as f64);
    let data = x.data();
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ci in 0..c {
        let mut acc = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                acc = acc + data[base + s];
            }
        }
        mean[ci] = acc / count;
    }
    for ci in 0..c {
        let m = mean[ci];
        let mut acc = E::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let d = data[base + s] - m;
                acc = acc + d * d;
            }
        }
        var[ci] = acc / count;
    }
    Ok((mean, var))
}

impl<E: Scalar> Tape<E> {
    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(EkdError::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_vec(self.shape_of(a).to_vec(), data)?;
        self.record("add", value, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let value = Tensor::from_vec(self.shape_of(a).to_vec(), data)?;
        self.record("sub", value, Op::Sub { a: a.0, b: b.0 })
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("elementwise_mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::from_vec(self.shape_of(a).to_vec(), data)?;
        self.record("elementwise_mul", value, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scalar_mul(&mut self, a: Var, factor: E) -> Result<Var> {
        if !factor.is_finite() {
            return Err(EkdError::non_finite("scalar_mul factor"));
        }
        let value = self.nodes[a.0].value.map(|v| v * factor);
        self.record("scalar_mul", value, Op::ScalarMul { a: a.0, factor })
    }

    /// `[rows, d] + [d]` broadcast add (linear-layer bias).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape_of(x);
        let bs = self.shape_of(bias);
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(EkdError::shape(
                "add_bias",
                format!("{xs:?} + {bs:?}"),
            ));
        }
        let d = xs[1];
        let bias_data = self.nodes[bias.0].value.data();
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bias_data[i % d])
            .collect();
        let value = Tensor::from_vec(xs.to_vec(), data)?;
        self.record("add_bias", value, Op::AddBias { x: x.0, bias: bias.0 })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EkdError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let value = Tensor::from_vec(vec![m, n], data)?;
        self.record("matmul", value, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.map(|v| if v > E::zero() { v } else { E::zero() });
        self.record("relu", value, Op::Relu { x: x.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        self.record("reshape", value, Op::Reshape { x: x.0 })
    }

    /// Collapses all axes after the first: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape_of(x);
        if shape.is_empty() {
            return Err(EkdError::shape("flatten", "rank-0 input"));
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape_of(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(EkdError::shape(
                "permute",
                format!("axes {axes:?} invalid for shape {shape:?}"),
            ));
        }
        let (out_shape, data) = kernels::permute(self.nodes[x.0].value.data(), shape, axes);
        let value = Tensor::from_vec(out_shape, data)?;
        self.record(
            "permute",
            value,
            Op::Permute {
                x: x.0,
                axes: axes.to_vec(),
            },
        )
    }

    /// Patch-gather lowering of NCHW input for convolution.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let shape = self.shape_of(x);
        if shape.len() != 4 {
            return Err(EkdError::shape(
                "im2col",
                format!("expected NCHW input, got {shape:?}"),
            ));
        }
        let geom = ConvGeom::new(shape[0], shape[1], shape[2], shape[3], kernel, stride, padding)?;
        let data = kernels::im2col(self.nodes[x.0].value.data(), &geom);
        let value = Tensor::from_vec(vec![geom.patch_len(), geom.positions()], data)?;
        self.record("im2col", value, Op::Im2Col { x: x.0, geom })
    }

    /// 2D convolution of NCHW input with `[c_out, c_in, k, k]` kernels,
    /// built from im2col + matmul so it has no gradient rule of its own.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(EkdError::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}"),
            ));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(EkdError::shape(
                "conv2d",
                format!("kernel {ws:?} does not match input channels {}", xs[1]),
            ));
        }
        let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
        let geom = ConvGeom::new(xs[0], c_in, xs[2], xs[3], k, stride, padding)?;
        let cols = self.im2col(x, k, stride, padding)?;
        let w2d = self.reshape(weight, vec![c_out, geom.patch_len()])?;
        let out = self.matmul(w2d, cols)?;
        let out = self.reshape(out, vec![c_out, geom.n, geom.out_h, geom.out_w])?;
        self.permute(out, &[1, 0, 2, 3])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape_of(x);
        if shape.len() != 4 {
            return Err(EkdError::shape(
                "max_pool2d",
                format!("expected NCHW input, got {shape:?}"),
            ));
        }
        let geom = PoolGeom::new(shape[0], shape[1], shape[2], shape[3], kernel, stride)?;
        let (data, argmax) = kernels::max_pool(self.nodes[x.0].value.data(), &geom);
        let value = Tensor::from_vec(vec![geom.n, geom.c, geom.out_h, geom.out_w], data)?;
        self.record(
            "max_pool2d",
            value,
            Op::MaxPool { x: x.0, argmax },
        )
    }

    /// Spatial mean of NCHW input: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape_of(x);
        if shape.len() != 4 {
            return Err(EkdError::shape(
                "global_avg_pool2d",
                format!("expected NCHW input, got {shape:?}"),
            ));
        }
        let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = E::from_f64c(1.0 / spatial as f64);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(n * c);
        for nc in 0..n * c {
            let mut acc = E::zero();
            for s in 0..spatial {
                acc = acc + src[nc * spatial + s];
            }
            data.push(acc * inv);
        }
        let value = Tensor::from_vec(vec![n, c], data)?;
        self.record("global_avg_pool2d", value, Op::GlobalAvgPool { x: x.0 })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(EkdError::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = src[at(0)];
                for j in 1..len {
                    if src[at(j)] > m {
                        m = src[at(j)];
                    }
                }
                let mut sum = E::zero();
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    data[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        self.record("softmax", value, Op::Softmax { x: x.0, axis })
    }

    /// Numerically stable `log(softmax(x))` via max subtraction.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(EkdError::shape(
                "log_softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = src[at(0)];
                for j in 1..len {
                    if src[at(j)] > m {
                        m = src[at(j)];
                    }
                }
                let mut sum = E::zero();
                for j in 0..len {
                    sum = sum + (src[at(j)] - m).exp();
                }
                let lse = m + sum.ln();
                for j in 0..len {
                    data[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        self.record("log_softmax", value, Op::LogSoftmax { x: x.0, axis })
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if axis >= shape.len() {
            return Err(EkdError::shape(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::from_vec(out_shape, data)?;
        self.record("sum_axis", value, Op::SumAxis { x: x.0, axis })
    }

    /// Sum of all elements to a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::zero();
        for v in self.nodes[x.0].value.data() {
            acc = acc + *v;
        }
        let value = Tensor::scalar(acc);
        self.record("sum_all", value, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let numel = self.nodes[x.0].value.numel();
        let total = self.sum_all(x)?;
        self.scalar_mul(total, E::from_f64c(1.0 / numel as f64))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = self.shape_of(x)[axis];
        let total = self.sum_axis(x, axis)?;
        self.scalar_mul(total, E::from_f64c(1.0 / len as f64))
    }

    /// Batch normalization of NCHW input with per-channel scale and shift.
    ///
    /// `mean`/`var` are supplied by the caller: batch statistics in training
    /// (set `stats_from_batch`) or running statistics in evaluation. Running
    /// statistic updates are the caller's responsibility.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[E],
        var: &[E],
        eps: E,
        stats_from_batch: bool,
    ) -> Result<Var> {
        let shape = self.shape_of(x).to_vec();
        if shape.len() != 4 {
            return Err(EkdError::shape(
                "batch_norm2d",
                format!("expected NCHW input, got {shape:?}"),
            ));
        }
        let c = shape[1];
        if self.shape_of(scale) != [c] || self.shape_of(shift) != [c] || mean.len() != c || var.len() != c {
            return Err(EkdError::shape(
                "batch_norm2d",
                format!("per-channel operands must have length {c}"),
            ));
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let (n, spatial) = (shape[0], shape[2] * shape[3]);
        let src = self.nodes[x.0].value.data();
        let scale_v = self.nodes[scale.0].value.data();
        let shift_v = self.nodes[shift.0].value.data();
        let mut data = vec![E::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let a = scale_v[ci] * inv_std[ci];
                let b = shift_v[ci] - mean[ci] * a;
                let base = (ni * c + ci) * spatial;
                for s in 0..spatial {
                    data[base + s] = src[base + s] * a + b;
                }
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        self.record(
            "batch_norm2d",
            value,
            Op::BatchNorm(Box::new(BatchNormCtx {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                mean: mean.to_vec(),
                inv_std,
                stats_from_batch,
            })),
        )
    }

    pub(crate) fn backprop_node(&mut self, id: usize) {
        let (left, right) = self.nodes.split_at_mut(id);
        let node = &right[0];
        let g = node.grad.as_ref().expect("caller checked grad").as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accumulate(left, *a, g);
                accumulate(left, *b, g);
            }
            Op::Sub { a, b } => {
                accumulate(left, *a, g);
                if left[*b].requires_grad {
                    let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                    accumulate_owned(left, *b, neg);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if left[a].requires_grad {
                    let ga: Vec<E> = g
                        .iter()
                        .zip(left[b].value.data())
                        .map(|(gi, bv)| *gi * *bv)
                        .collect();
                    accumulate_owned(left, a, ga);
                }
                if left[b].requires_grad {
                    let gb: Vec<E> = g
                        .iter()
                        .zip(left[a].value.data())
                        .map(|(gi, av)| *gi * *av)
                        .collect();
                    accumulate_owned(left, b, gb);
                }
            }
            Op::ScalarMul { a, factor } => {
                if left[*a].requires_grad {
                    let f = *factor;
                    let ga: Vec<E> = g.iter().map(|gi| *gi * f).collect();
                    accumulate_owned(left, *a, ga);
                }
            }
            Op::AddBias { x, bias } => {
                accumulate(left, *x, g);
                if left[*bias].requires_grad {
                    let d = left[*bias].value.numel();
                    let mut gb = vec![E::zero(); d];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + *gi;
                    }
                    accumulate_owned(left, *bias, gb);
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let m = left[a].value.shape()[0];
                let k = left[a].value.shape()[1];
                let n = left[b].value.shape()[1];
                if left[a].requires_grad {
                    let da = kernels::matmul_nt(g, left[b].value.data(), m, k, n);
                    accumulate_owned(left, a, da);
                }
                if left[b].requires_grad {
                    let db = kernels::matmul_tn(left[a].value.data(), g, m, k, n);
                    accumulate_owned(left, b, db);
                }
            }
            Op::Relu { x } => {
                if left[*x].requires_grad {
                    let dx: Vec<E> = g
                        .iter()
                        .zip(left[*x].value.data())
                        .map(|(gi, xv)| if *xv > E::zero() { *gi } else { E::zero() })
                        .collect();
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::Reshape { x } => {
                accumulate(left, *x, g);
            }
            Op::Permute { x, axes } => {
                if left[*x].requires_grad {
                    let inv = kernels::inverse_axes(axes);
                    let (_, dx) = kernels::permute(g, node.value.shape(), &inv);
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::Im2Col { x, geom } => {
                if left[*x].requires_grad {
                    let mut dx = vec![E::zero(); left[*x].value.numel()];
                    kernels::col2im_add(g, geom, &mut dx);
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if left[*x].requires_grad {
                    let mut dx = vec![E::zero(); left[*x].value.numel()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src as usize] = dx[src as usize] + *gi;
                    }
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if left[*x].requires_grad {
                    let shape = left[*x].value.shape();
                    let spatial = shape[2] * shape[3];
                    let inv = E::from_f64c(1.0 / spatial as f64);
                    let mut dx = vec![E::zero(); left[*x].value.numel()];
                    for (nc, gi) in g.iter().enumerate() {
                        let v = *gi * inv;
                        for s in 0..spatial {
                            dx[nc * spatial + s] = v;
                        }
                    }
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::Softmax { x, axis } => {
                if left[*x].requires_grad {
                    let s = node.value.data();
                    let (outer, len, inner) = lane_dims(node.value.shape(), *axis);
                    let mut dx = vec![E::zero(); s.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = E::zero();
                            for j in 0..len {
                                dot = dot + g[at(j)] * s[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                if left[*x].requires_grad {
                    let y = node.value.data();
                    let (outer, len, inner) = lane_dims(node.value.shape(), *axis);
                    let mut dx = vec![E::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut sum_g = E::zero();
                            for j in 0..len {
                                sum_g = sum_g + g[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = g[at(j)] - y[at(j)].exp() * sum_g;
                            }
                        }
                    }
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::SumAxis { x, axis } => {
                if left[*x].requires_grad {
                    let shape = left[*x].value.shape();
                    let (outer, len, inner) = lane_dims(shape, *axis);
                    let mut dx = vec![E::zero(); left[*x].value.numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                dx[base + i] = g[o * inner + i];
                            }
                        }
                    }
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::SumAll { x } => {
                if left[*x].requires_grad {
                    let dx = vec![g[0]; left[*x].value.numel()];
                    accumulate_owned(left, *x, dx);
                }
            }
            Op::BatchNorm(ctx) => {
                let shape = left[ctx.x].value.shape();
                let (n, c, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = E::from_f64c((n * spatial) as f64);
                let x_data = left[ctx.x].value.data();
                let scale_v = left[ctx.scale].value.data();

                // Per-channel reductions: sum(g) and sum(g * x_hat).
                let mut sum_g = vec![E::zero(); c];
                let mut sum_gx = vec![E::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * spatial;
                        let mut sg = E::zero();
                        let mut sgx = E::zero();
                        for s in 0..spatial {
                            let gi = g[base + s];
                            let xh = (x_data[base + s] - ctx.mean[ci]) * ctx.inv_std[ci];
                            sg = sg + gi;
                            sgx = sgx + gi * xh;
                        }
                        sum_g[ci] = sum_g[ci] + sg;
                        sum_gx[ci] = sum_gx[ci] + sgx;
                    }
                }

                let dx = if left[ctx.x].requires_grad {
                    let mut dx = vec![E::zero(); x_data.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let a = scale_v[ci] * ctx.inv_std[ci];
                            let base = (ni * c + ci) * spatial;
                            if ctx.stats_from_batch {
                                let mean_g = sum_g[ci] / m;
                                let mean_gx = sum_gx[ci] / m;
                                for s in 0..spatial {
                                    let xh =
                                        (x_data[base + s] - ctx.mean[ci]) * ctx.inv_std[ci];
                                    dx[base + s] = a * (g[base + s] - mean_g - xh * mean_gx);
                                }
                            } else {
                                for s in 0..spatial {
                                    dx[base + s] = a * g[base + s];
                                }
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };

                let (xi, scale_i, shift_i) = (ctx.x, ctx.scale, ctx.shift);
                if let Some(dx) = dx {
                    accumulate_owned(left, xi, dx);
                }
                if left[scale_i].requires_grad {
                    accumulate_owned(left, scale_i, sum_gx);
                }
                if left[shift_i].requires_grad {
                    accumulate_owned(left, shift_i, sum_g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>, rg: bool) -> Var {
        tape.leaf(Tensor::from_vec(shape, data).unwrap(), rg).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![3], vec![-1.0, 0.0, 2.0], false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_pair() {
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![0.0, 0.0], false);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv2d_all_ones_sliding_sum() {
        // 1x1x4x4 ones, 1x1x3x3 ones, stride 1, padding 0 -> 1x1x2x2 of 9s
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![1, 1, 4, 4], vec![1.0; 16], false);
        let w = leaf64(&mut tape, vec![1, 1, 3, 3], vec![1.0; 9], false);
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn backward_square_sum() {
        // root = sum(w * w), w = [1,2,3] -> grad = [2,4,6]
        let mut tape = Tape::new();
        let w = leaf64(&mut tape, vec![3], vec![1.0, 2.0, 3.0], true);
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum_all(sq).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_over_repeated_use() {
        // y = sum(x) + sum(x): grad must be 2 everywhere.
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, -1.0], true);
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let root = tape.add(s1, s2).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0], true);
        let d = tape.detach(x);
        assert!(!tape.requires_grad(d));
        assert!(tape.value(d).bit_eq(tape.value(x)));
        let y = tape.mul(d, d).unwrap();
        let root = tape.sum_all(y).unwrap();
        tape.backward(root).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0], true);
        let y = tape.relu(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_without_grad_path_is_noop() {
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0], false);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape
            .leaf(Tensor::from_vec(vec![1], vec![1.0e30f32]).unwrap(), false)
            .unwrap();
        // 1e60 overflows f32
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(
            err,
            crate::error::EkdError::NumericInstability { .. }
        ));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut tape = Tape::new();
        let data = vec![0.3, -1.2, 2.0, 0.0, 5.0, -3.0];
        let x = leaf64(&mut tape, vec![2, 3], data, false);
        let s = tape.softmax(x, 1).unwrap();
        let ls = tape.log_softmax(x, 1).unwrap();
        for (a, b) in tape.value(s).data().iter().zip(tape.value(ls).data()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_axis_shapes() {
        let mut tape = Tape::new();
        let x = leaf64(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let rows = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.value(rows).shape(), &[2]);
        assert_eq!(tape.value(rows).data(), &[6.0, 15.0]);
        let all = tape.sum_all(x).unwrap();
        assert!(tape.value(all).shape().is_empty());
        assert_eq!(tape.value(all).item(), 21.0);
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::new();
        let x = leaf64(
            &mut tape,
            vec![2, 1, 1, 2],
            vec![1.0, 2.0, 3.0, 4.0],
            false,
        );
        let scale = leaf64(&mut tape, vec![1], vec![1.0], false);
        let shift = leaf64(&mut tape, vec![1], vec![0.0], false);
        let (mean, var) = bn_batch_stats(tape.value(x)).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        let y = tape
            .batch_norm2d(x, scale, shift, &mean, &var, 0.0, true)
            .unwrap();
        let out = tape.value(y).data();
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        let v: f64 = out.iter().map(|o| (o - m) * (o - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-9);
    }
}
