//! Reverse-mode autodiff over dense dynamic-dimension tensors.
//!
//! A [`Tape`] records eagerly evaluated ops; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. The op set is exactly what
//! the BEV networks and losses need: elementwise arithmetic, reductions,
//! broadcasts, 2D convolution, nearest upsampling, bilinear resize,
//! (log-)softmax and fused classification losses.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Slice};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, S),
    Neg(NodeId),
    Exp(NodeId),
    /// ln(x + eps)
    LnEps(NodeId, S),
    /// sqrt(x + eps)
    SqrtEps(NodeId, S),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// max(x, s); gradient passes only where x > s.
    MaxScalar(NodeId, S),
    Abs(NodeId),
    /// (m,k) · (k,n) matrix product.
    MatMul(NodeId, NodeId),
    /// Column scatter-add: out[c, targets[p]] += in[c, p]; targets < 0 dropped.
    ScatterColumns { input: NodeId, targets: Vec<i64> },
    SumAll(NodeId),
    SumAxis(NodeId, usize),
    /// Insert an axis at position `axis`, repeating the input.
    BroadcastAxis(NodeId, usize),
    Reshape(NodeId),
    /// Select one index along an axis, removing that axis.
    IndexAxis(NodeId, usize, usize),
    Transpose2(NodeId),
    Concat(NodeId, NodeId, usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(NodeId),
    BilinearResize(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    /// Mean NLL over positions with target >= 0; logits shape (C, N).
    CrossEntropyMean { logits: NodeId, targets: Vec<i64> },
    /// Mean binary CE with logits over positions where mask > 0.
    BceWithLogitsMean {
        logits: NodeId,
        targets: ArrayD<S>,
        mask: ArrayD<S>,
    },
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Eagerly evaluated autodiff record.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input (parameter or probed activation).
    pub fn var(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, frozen teacher tensors, masks).
    pub fn constant(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "expected scalar node");
        *v.iter().next().unwrap()
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: Op<S>) -> NodeId {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "binary op shape mismatch"
        );
        let value = match &op {
            Op::Add(..) => &self.nodes[a.0].value + &self.nodes[b.0].value,
            Op::Sub(..) => &self.nodes[a.0].value - &self.nodes[b.0].value,
            Op::Mul(..) => &self.nodes[a.0].value * &self.nodes[b.0].value,
            Op::Div(..) => &self.nodes[a.0].value / &self.nodes[b.0].value,
            _ => unreachable!(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: S) -> NodeId {
        let value = self.value(a).mapv(|v| v + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: S) -> NodeId {
        let value = self.value(a).mapv(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| -v);
        let rg = self.rg(a);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.exp());
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn ln_eps(&mut self, a: NodeId, eps: S) -> NodeId {
        let value = self.value(a).mapv(|v| (v + eps).ln());
        let rg = self.rg(a);
        self.push(value, Op::LnEps(a, eps), rg)
    }

    pub fn sqrt_eps(&mut self, a: NodeId, eps: S) -> NodeId {
        let value = self.value(a).mapv(|v| (v + eps).sqrt());
        let rg = self.rg(a);
        self.push(value, Op::SqrtEps(a, eps), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = S::one();
        let value = self.value(a).mapv(|v| one / (one + (-v).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn max_scalar(&mut self, a: NodeId, s: S) -> NodeId {
        let value = self.value(a).mapv(|v| v.max(s));
        let rg = self.rg(a);
        self.push(value, Op::MaxScalar(a, s), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| v.abs());
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    /// ln(max(x, floor)) — exact zero for x = 1.
    pub fn ln_clamp(&mut self, a: NodeId, floor: S) -> NodeId {
        let m = self.max_scalar(a, floor);
        self.ln_eps(m, S::zero())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), 2);
        assert_eq!(bv.ndim(), 2);
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
        let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let value = a2.dot(&b2).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Column scatter-add. `input` is `(C, P)`, output `(C, out_cols)`;
    /// column `p` is added into output column `targets[p]`, negatives dropped.
    pub fn scatter_columns(&mut self, input: NodeId, targets: Vec<i64>, out_cols: usize) -> NodeId {
        let x = self.value(input);
        assert_eq!(x.ndim(), 2);
        let (c, p) = (x.shape()[0], x.shape()[1]);
        assert_eq!(targets.len(), p);
        let mut out = ArrayD::zeros(IxDyn(&[c, out_cols]));
        for (j, &t) in targets.iter().enumerate() {
            if t >= 0 {
                let t = t as usize;
                assert!(t < out_cols, "scatter target out of range");
                for ci in 0..c {
                    out[[ci, t]] = out[[ci, t]] + x[[ci, j]];
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::ScatterColumns { input, targets }, rg)
    }

    /// Sum of all elements, producing a 0-d tensor.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: S = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(scalar_arr(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.mul_scalar(s, S::c(1.0 / n as f64))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let value = self.value(a).sum_axis(Axis(axis));
        let rg = self.rg(a);
        self.push(value, Op::SumAxis(a, axis), rg)
    }

    /// Inverse of `sum_axis`: repeat along a new axis of length `n`.
    pub fn broadcast_axis(&mut self, a: NodeId, axis: usize, n: usize) -> NodeId {
        let v = self.value(a);
        let mut shape = v.shape().to_vec();
        shape.insert(axis, n);
        let expanded = v
            .clone()
            .insert_axis(Axis(axis))
            .broadcast(IxDyn(&shape))
            .expect("broadcast")
            .to_owned();
        let rg = self.rg(a);
        self.push(expanded, Op::BroadcastAxis(a, axis), rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(a)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape element count mismatch");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Select index `i` along `axis`, removing the axis.
    pub fn index_axis(&mut self, a: NodeId, axis: usize, i: usize) -> NodeId {
        let value = self.value(a).index_axis(Axis(axis), i).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::IndexAxis(a, axis, i), rg)
    }

    /// Transpose a 2-D tensor.
    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.ndim(), 2);
        let value = v.t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose2(a), rg)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> NodeId {
        let value = ndarray::concatenate(
            Axis(axis),
            &[self.value(a).view(), self.value(b).view()],
        )
        .expect("concat shape mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Concat(a, b, axis), rg)
    }

    /// 2D convolution. Input `(Cin, H, W)`, weight `(Cout, Cin, kh, kw)`,
    /// optional bias `(Cout,)`, zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let x = self.value(input);
        let w = self.value(weight);
        assert_eq!(x.ndim(), 3, "conv2d input must be (Cin,H,W)");
        assert_eq!(w.ndim(), 4, "conv2d weight must be (Cout,Cin,kh,kw)");
        let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;

        let col = im2col(x, kh, kw, stride, pad, ho, wo);
        let w_mat = w
            .view()
            .into_shape((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut out_mat: Array2<S> = w_mat.dot(&col);
        if let Some(b) = bias {
            let bv = self.value(b);
            assert_eq!(bv.len(), cout, "conv2d bias length mismatch");
            for (mut row, &bias_v) in out_mat.rows_mut().into_iter().zip(bv.iter()) {
                row.mapv_inplace(|v| v + bias_v);
            }
        }
        let value = out_mat.into_shape((cout, ho, wo)).unwrap().into_dyn();
        let rg = self.rg(input) || self.rg(weight) || bias.map(|b| self.rg(b)).unwrap_or(false);
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// Nearest-neighbor ×2 upsampling of a `(C, H, W)` map.
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.ndim(), 3);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = x[[ci, hi, wi]];
                    out[[ci, 2 * hi, 2 * wi]] = v;
                    out[[ci, 2 * hi + 1, 2 * wi]] = v;
                    out[[ci, 2 * hi, 2 * wi + 1]] = v;
                    out[[ci, 2 * hi + 1, 2 * wi + 1]] = v;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Upsample2x(a), rg)
    }

    /// Bilinear resize of a `(C, H, W)` map to `(C, out_h, out_w)`,
    /// half-pixel centers, no antialiasing.
    pub fn bilinear_resize(&mut self, a: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.ndim(), 3);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, out_h, out_w]));
        for oh in 0..out_h {
            for ow in 0..out_w {
                for (iy, wy, ix, wx) in bilinear_taps(h, w, out_h, out_w, oh, ow) {
                    let wgt = S::c(wy * wx);
                    for ci in 0..c {
                        out[[ci, oh, ow]] = out[[ci, oh, ow]] + x[[ci, iy, ix]] * wgt;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::BilinearResize(a), rg)
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let value = softmax_arr(self.value(a), axis);
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a, axis), rg)
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> NodeId {
        let x = self.value(a);
        let max = x.map_axis(Axis(axis), |lane| {
            lane.iter().copied().fold(S::neg_infinity(), S::max)
        });
        let shifted = x - &max.clone().insert_axis(Axis(axis));
        let logsum = shifted
            .mapv(|v| v.exp())
            .sum_axis(Axis(axis))
            .mapv(|v| v.ln());
        let value = shifted - &logsum.insert_axis(Axis(axis));
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a, axis), rg)
    }

    /// Mean negative log-likelihood. `logits` is `(C, N)`; `targets[n] < 0`
    /// marks an ignored position. All positions ignored yields 0.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<i64>) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.ndim(), 2, "cross_entropy_mean expects (C, N) logits");
        let (c, n) = (x.shape()[0], x.shape()[1]);
        assert_eq!(targets.len(), n);
        let probs = softmax_arr(x, 0);
        let mut total = S::zero();
        let mut valid = 0usize;
        for (j, &t) in targets.iter().enumerate() {
            if t >= 0 {
                assert!((t as usize) < c, "target out of range");
                total = total - probs[[t as usize, j]].max(S::c(1e-300)).ln();
                valid += 1;
            }
        }
        let value = if valid > 0 {
            total / S::c(valid as f64)
        } else {
            S::zero()
        };
        let rg = self.rg(logits);
        self.push(scalar_arr(value), Op::CrossEntropyMean { logits, targets }, rg)
    }

    /// Mean binary cross-entropy with logits, over positions where `mask > 0`.
    pub fn bce_with_logits_mean(
        &mut self,
        logits: NodeId,
        targets: ArrayD<S>,
        mask: ArrayD<S>,
    ) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        assert_eq!(x.shape(), mask.shape());
        let mut total = S::zero();
        let mut count = S::zero();
        for ((&z, &t), &m) in x.iter().zip(targets.iter()).zip(mask.iter()) {
            if m > S::zero() {
                // log(1 + e^{-|z|}) + max(z,0) - z*t, numerically stable
                let log1p = (S::one() + (-z.abs()).exp()).ln();
                total = total + log1p + z.max(S::zero()) - z * t;
                count += S::one();
            }
        }
        let value = if count > S::zero() { total / count } else { S::zero() };
        let rg = self.rg(logits);
        self.push(
            scalar_arr(value),
            Op::BceWithLogitsMean {
                logits,
                targets,
                mask,
            },
            rg,
        )
    }

    /// Backpropagate from a scalar node; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(scalar_arr(S::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate_parents(&self, i: usize, gout: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let acc = |id: NodeId, g: ArrayD<S>, grads: &mut [Option<ArrayD<S>>]| {
            if !self.rg(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gout.clone(), grads);
                acc(*b, gout.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone(), grads);
                acc(*b, gout.mapv(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                acc(*a, gout * &self.nodes[b.0].value, grads);
                acc(*b, gout * &self.nodes[a.0].value, grads);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                acc(*a, gout / bv, grads);
                let av = &self.nodes[a.0].value;
                acc(*b, -(gout * av) / (bv * bv), grads);
            }
            Op::AddScalar(a) => acc(*a, gout.clone(), grads),
            Op::MulScalar(a, s) => acc(*a, gout.mapv(|v| v * *s), grads),
            Op::Neg(a) => acc(*a, gout.mapv(|v| -v), grads),
            Op::Exp(a) => acc(*a, gout * &self.nodes[i].value, grads),
            Op::LnEps(a, eps) => {
                let x = &self.nodes[a.0].value;
                acc(*a, gout / &x.mapv(|v| v + *eps), grads);
            }
            Op::SqrtEps(a, _) => {
                let y = &self.nodes[i].value;
                let half = S::c(0.5);
                acc(*a, gout * &y.mapv(|v| half / v.max(S::c(1e-300))), grads);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(*a, gout * &y.mapv(|v| v * (S::one() - v)), grads);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let m = x.mapv(|v| if v > S::zero() { S::one() } else { S::zero() });
                acc(*a, gout * &m, grads);
            }
            Op::MaxScalar(a, s) => {
                let x = &self.nodes[a.0].value;
                let m = x.mapv(|v| if v > *s { S::one() } else { S::zero() });
                acc(*a, gout * &m, grads);
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].value;
                let sign = x.mapv(|v| {
                    if v > S::zero() {
                        S::one()
                    } else if v < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                acc(*a, gout * &sign, grads);
            }
            Op::MatMul(a, b) => {
                let g2 = gout.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.rg(*a) {
                    let bv = self.nodes[b.0]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    acc(*a, g2.dot(&bv.t()).into_dyn(), grads);
                }
                if self.rg(*b) {
                    let av = self.nodes[a.0]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    acc(*b, av.t().dot(&g2).into_dyn(), grads);
                }
            }
            Op::ScatterColumns { input, targets } => {
                let x = &self.nodes[input.0].value;
                let (c, p) = (x.shape()[0], x.shape()[1]);
                let mut g = ArrayD::zeros(IxDyn(&[c, p]));
                for (j, &t) in targets.iter().enumerate() {
                    if t >= 0 {
                        for ci in 0..c {
                            g[[ci, j]] = gout[[ci, t as usize]];
                        }
                    }
                }
                acc(*input, g, grads);
            }
            Op::SumAll(a) => {
                let g = gout.iter().next().copied().unwrap();
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc(*a, ArrayD::from_elem(IxDyn(&shape), g), grads);
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = gout
                    .clone()
                    .insert_axis(Axis(*axis))
                    .broadcast(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                acc(*a, g, grads);
            }
            Op::BroadcastAxis(a, axis) => {
                acc(*a, gout.sum_axis(Axis(*axis)), grads);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc(*a, gout.clone().into_shape(IxDyn(&shape)).unwrap(), grads);
            }
            Op::IndexAxis(a, axis, idx) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let mut g = ArrayD::zeros(IxDyn(&shape));
                g.index_axis_mut(Axis(*axis), *idx).assign(gout);
                acc(*a, g, grads);
            }
            Op::Transpose2(a) => {
                acc(*a, gout.t().to_owned(), grads);
            }
            Op::Concat(a, b, axis) => {
                let na = self.nodes[a.0].value.shape()[*axis];
                let ga = gout
                    .slice_axis(Axis(*axis), Slice::from(0..na))
                    .to_owned();
                let gb = gout
                    .slice_axis(Axis(*axis), Slice::from(na..))
                    .to_owned();
                acc(*a, ga, grads);
                acc(*b, gb, grads);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (cin, _h, _w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (ho, wo) = (gout.shape()[1], gout.shape()[2]);
                let go_mat = gout
                    .view()
                    .into_shape((cout, ho * wo))
                    .unwrap()
                    .to_owned();

                if self.rg(*weight) {
                    let col = im2col(x, kh, kw, *stride, *pad, ho, wo);
                    let gw = go_mat.dot(&col.t());
                    acc(
                        *weight,
                        gw.into_shape((cout, cin, kh, kw)).unwrap().into_dyn(),
                        grads,
                    );
                }
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let gb: Array1<S> = go_mat.sum_axis(Axis(1));
                        acc(*b, gb.into_dyn(), grads);
                    }
                }
                if self.rg(*input) {
                    let w_mat = w
                        .view()
                        .into_shape((cout, cin * kh * kw))
                        .unwrap()
                        .to_owned();
                    let gcol = w_mat.t().dot(&go_mat);
                    let gx = col2im(&gcol, cin, x.shape()[1], x.shape()[2], kh, kw, *stride, *pad, ho, wo);
                    acc(*input, gx, grads);
                }
            }
            Op::Upsample2x(a) => {
                let (c, h2, w2) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut g = ArrayD::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            g[[ci, hi, wi]] = gout[[ci, 2 * hi, 2 * wi]]
                                + gout[[ci, 2 * hi + 1, 2 * wi]]
                                + gout[[ci, 2 * hi, 2 * wi + 1]]
                                + gout[[ci, 2 * hi + 1, 2 * wi + 1]];
                        }
                    }
                }
                acc(*a, g, grads);
            }
            Op::BilinearResize(a) => {
                let src = &self.nodes[a.0].value;
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let (out_h, out_w) = (gout.shape()[1], gout.shape()[2]);
                let mut g = ArrayD::zeros(IxDyn(&[c, h, w]));
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        for (iy, wy, ix, wx) in bilinear_taps(h, w, out_h, out_w, oh, ow) {
                            let wgt = S::c(wy * wx);
                            for ci in 0..c {
                                g[[ci, iy, ix]] = g[[ci, iy, ix]] + gout[[ci, oh, ow]] * wgt;
                            }
                        }
                    }
                }
                acc(*a, g, grads);
            }
            Op::Softmax(a, axis) => {
                let y = &self.nodes[i].value;
                let dot = (gout * y).sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                acc(*a, y * &(gout - &dot), grads);
            }
            Op::LogSoftmax(a, axis) => {
                let y = self.nodes[i].value.mapv(|v| v.exp());
                let s = gout.sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                acc(*a, gout - &(&y * &s), grads);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let g = gout.iter().next().copied().unwrap();
                let x = &self.nodes[logits.0].value;
                let probs = softmax_arr(x, 0);
                let valid = targets.iter().filter(|&&t| t >= 0).count();
                let mut gx = ArrayD::zeros(IxDyn(x.shape()));
                if valid > 0 {
                    let inv = S::c(1.0 / valid as f64) * g;
                    let c = x.shape()[0];
                    for (j, &t) in targets.iter().enumerate() {
                        if t >= 0 {
                            for ci in 0..c {
                                let onehot = if ci == t as usize { S::one() } else { S::zero() };
                                gx[[ci, j]] = (probs[[ci, j]] - onehot) * inv;
                            }
                        }
                    }
                }
                acc(*logits, gx, grads);
            }
            Op::BceWithLogitsMean {
                logits,
                targets,
                mask,
            } => {
                let g = gout.iter().next().copied().unwrap();
                let x = &self.nodes[logits.0].value;
                let count = mask.iter().filter(|&&m| m > S::zero()).count();
                let mut gx = ArrayD::zeros(IxDyn(x.shape()));
                if count > 0 {
                    let inv = S::c(1.0 / count as f64) * g;
                    for ((dst, (&z, &t)), &m) in gx
                        .iter_mut()
                        .zip(x.iter().zip(targets.iter()))
                        .zip(mask.iter())
                    {
                        if m > S::zero() {
                            let sig = S::one() / (S::one() + (-z).exp());
                            *dst = (sig - t) * inv;
                        }
                    }
                }
                acc(*logits, gx, grads);
            }
        }
    }
}

/// Gradient bundle returned by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root w.r.t. node `id`; zeros when the node does not
    /// influence the root (or did not require gradients).
    pub fn wrt(&self, tape: &Tape<S>, id: NodeId) -> ArrayD<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(tape.value(id).shape())),
        }
    }

    pub fn has_grad(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn scalar_arr<S: Scalar>(v: S) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn softmax_arr<S: Scalar>(x: &ArrayD<S>, axis: usize) -> ArrayD<S> {
    let max = x.map_axis(Axis(axis), |lane| {
        lane.iter().copied().fold(S::neg_infinity(), S::max)
    });
    let e = (x - &max.insert_axis(Axis(axis))).mapv(|v| v.exp());
    let sum = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    e / &sum
}

fn im2col<S: Scalar>(
    x: &ArrayD<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<S> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    gcol: &Array2<S>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ArrayD<S> {
    let mut gx = ArrayD::zeros(IxDyn(&[cin, h, w]));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[[c, iy as usize, ix as usize]] =
                            gx[[c, iy as usize, ix as usize]] + gcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    gx
}

/// The 4 bilinear source taps (y index, y weight, x index, x weight) for one
/// output pixel, half-pixel convention with edge clamping.
fn bilinear_taps(
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    oh: usize,
    ow: usize,
) -> Vec<(usize, f64, usize, f64)> {
    let map = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let src = src.clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        (i0, i1, frac)
    };
    let (y0, y1, fy) = map(oh, out_h, h);
    let (x0, x1, fx) = map(ow, out_w, w);
    vec![
        (y0, 1.0 - fy, x0, 1.0 - fx),
        (y0, 1.0 - fy, x1, fx),
        (y1, fy, x0, 1.0 - fx),
        (y1, fy, x1, fx),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn d(a: ndarray::Array2<f64>) -> ArrayD<f64> {
        a.into_dyn()
    }

    #[test]
    fn add_mul_backward() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.var(d(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let b = t.var(d(arr2(&[[5.0, 6.0], [7.0, 8.0]])));
        let p = t.mul(a, b);
        let s = t.sum_all(p);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, a), d(arr2(&[[5.0, 6.0], [7.0, 8.0]])));
        assert_eq!(g.wrt(&t, b), d(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
    }

    #[test]
    fn conv2d_known_values() {
        // 1x1 input channel, 3x3 image, identity-ish kernel.
        let mut t: Tape<f64> = Tape::new();
        let x_vals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = t.var(ArrayD::from_shape_vec(IxDyn(&[1, 3, 3]), x_vals).unwrap());
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0; // center tap
        let w = t.var(ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), wv).unwrap());
        let y = t.conv2d(x, w, None, 1, 1);
        assert_eq!(t.value(y).shape(), &[1, 3, 3]);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(ArrayD::zeros(IxDyn(&[2, 8, 8])));
        let w = t.var(ArrayD::zeros(IxDyn(&[4, 2, 3, 3])));
        let y = t.conv2d(x, w, None, 2, 1);
        assert_eq!(t.value(y).shape(), &[4, 4, 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(d(arr2(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]])));
        let y = t.softmax(x, 0);
        let v = t.value(y);
        for j in 0..3 {
            let s: f64 = (0..2).map(|i| v[[i, j]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(ArrayD::zeros(IxDyn(&[4, 5])));
        let l = t.cross_entropy_mean(x, vec![0, 1, 2, 3, 0]);
        assert!((t.scalar_value(l) - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(ArrayD::zeros(IxDyn(&[3, 2])));
        let l = t.cross_entropy_mean(x, vec![-1, -1]);
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn upsample_then_sum_matches_scaled_sum() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let u = t.upsample2x(x);
        let s = t.sum_all(u);
        assert_eq!(t.scalar_value(s), 4.0 * 10.0);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, x), ArrayD::from_elem(IxDyn(&[1, 2, 2]), 4.0));
    }

    #[test]
    fn bilinear_resize_constant_preserved() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(ArrayD::from_elem(IxDyn(&[2, 5, 7]), 3.25));
        let y = t.bilinear_resize(x, 3, 3);
        for v in t.value(y).iter() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_nodes_get_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.var(d(arr2(&[[2.0]])));
        let c = t.constant(d(arr2(&[[3.0]])));
        let p = t.mul(a, c);
        let s = t.sum_all(p);
        let g = t.backward(s);
        assert!(!g.has_grad(c));
        assert_eq!(g.wrt(&t, c), d(arr2(&[[0.0]])));
        assert_eq!(g.wrt(&t, a), d(arr2(&[[3.0]])));
    }

    #[test]
    fn concat_backward_splits() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.var(ArrayD::from_elem(IxDyn(&[1, 2, 2]), 1.0));
        let b = t.var(ArrayD::from_elem(IxDyn(&[2, 2, 2]), 2.0));
        let c = t.concat(a, b, 0);
        assert_eq!(t.value(c).shape(), &[3, 2, 2]);
        let c2 = t.mul_scalar(c, 2.0);
        let s = t.sum_all(c2);
        let g = t.backward(s);
        assert_eq!(g.wrt(&t, a), ArrayD::from_elem(IxDyn(&[1, 2, 2]), 2.0));
        assert_eq!(g.wrt(&t, b), ArrayD::from_elem(IxDyn(&[2, 2, 2]), 2.0));
    }
}
