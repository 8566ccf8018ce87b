//! Reverse-mode differentiation over a linear operation tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Operations
//! append a node holding the result value plus an [`Op`] record naming its
//! inputs; [`Tape::backward`] replays the records in exact reverse order,
//! accumulating vector-Jacobian products. A tape is confined to one logical
//! training step — no two steps share one.
//!
//! Determinism: every reduction and matmul accumulates left-to-right in a
//! fixed loop order, so forward results and gradients are bitwise reproducible
//! for identical inputs. Nothing on the tape is mutated in place after
//! creation.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, for_each_broadcast_pair, Tensor};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Maximum; ties route the gradient to the first attaining index in
    /// row-major order.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; on ties the left operand receives the gradient.
    MaxWith,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, s: T },
    MaxWithScalar { a: Var, s: T },
    Relu { a: Var },
    Sqrt { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Neg { a: Var },
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Reduce { a: Var, kind: ReduceKind, axes: Vec<usize> },
    Softmax { a: Var, axis: usize },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize, len: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    /// Persistent gradient, populated by [`Tape::backward`]. Repeated
    /// backward calls accumulate here until [`Tape::zero_grads`].
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    /// Whether gradients must flow through this node (itself a parameter or
    /// downstream of one).
    track: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    detach_log: Vec<Tensor<T>>,
    pinned_detach: Option<Vec<Tensor<T>>>,
    detach_cursor: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), detach_log: Vec::new(), pinned_detach: None, detach_cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input that does not need gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, false, Op::Leaf)
    }

    /// Registers a trainable parameter; [`Tape::backward`] will accumulate
    /// its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, track: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, track: track || requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].track
    }

    /// Value copy detached from the graph: same data, no gradient flow.
    ///
    /// A detached node acts as an independent constant input `c = value(v)`;
    /// the analytic gradient of the graph treats `c` as fixed. Finite
    /// differences must therefore also hold `c` fixed while perturbing
    /// upstream inputs — [`Tape::pin_detaches`] replays logged constants for
    /// exactly that purpose.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = match &self.pinned_detach {
            Some(pinned) => {
                let t = pinned
                    .get(self.detach_cursor)
                    .expect("pinned detach constants exhausted; graph structure changed")
                    .clone();
                self.detach_cursor += 1;
                t
            }
            None => self.nodes[v.0].value.clone(),
        };
        self.detach_log.push(value.clone());
        self.leaf(value)
    }

    /// The constants produced by every `detach` call so far, in call order.
    pub fn detach_values(&self) -> &[Tensor<T>] {
        &self.detach_log
    }

    /// Replays the given constants for subsequent `detach` calls instead of
    /// reading current values. Used by gradient verification to evaluate the
    /// same function the backward pass differentiates.
    pub fn pin_detaches(&mut self, values: Vec<Tensor<T>>) {
        self.pinned_detach = Some(values);
        self.detach_cursor = 0;
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        if kind == BinaryKind::Div {
            if let Some(pos) = vb.data().iter().position(|&x| x == T::zero()) {
                return Err(Error::domain("div", format!("division by exact zero at flat index {pos}")));
            }
        }
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for_each_broadcast_pair(&out_shape, va.shape(), vb.shape(), |o, ai, bi| {
            let (x, y) = (va.data()[ai], vb.data()[bi]);
            data[o] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::MaxWith => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            };
        });
        let track = self.tracked(a) || self.tracked(b);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, false, track, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise division; rejects any exact-zero denominator element.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise maximum of two tensors; ties favour the left operand in
    /// the backward pass.
    pub fn max_with(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::MaxWith, a, b)
    }

    // ── elementwise scalar / unary ops ──────────────────────────────────

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + s);
        let track = self.tracked(a);
        self.push(value, false, track, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * s);
        let track = self.tracked(a);
        self.push(value, false, track, Op::MulScalar { a, s })
    }

    /// Elementwise `max(x, s)`; on ties the tensor operand receives the
    /// gradient.
    pub fn max_with_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x >= s { x } else { s });
        let track = self.tracked(a);
        self.push(value, false, track, Op::MaxWithScalar { a, s })
    }

    /// `max(x, 0)` with zero subgradient at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let track = self.tracked(a);
        self.push(value, false, track, Op::Relu { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(pos) = self.nodes[a.0].value.data().iter().position(|&x| x < T::zero()) {
            return Err(Error::domain("sqrt", format!("negative argument at flat index {pos}")));
        }
        let value = self.nodes[a.0].value.map(|x| x.sqrt());
        let track = self.tracked(a);
        Ok(self.push(value, false, track, Op::Sqrt { a }))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        let track = self.tracked(a);
        self.push(value, false, track, Op::Exp { a })
    }

    /// Natural log; rejects non-positive arguments.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(pos) = self.nodes[a.0].value.data().iter().position(|&x| x <= T::zero()) {
            return Err(Error::domain("log", format!("non-positive argument at flat index {pos}")));
        }
        let value = self.nodes[a.0].value.map(|x| x.ln());
        let track = self.tracked(a);
        Ok(self.push(value, false, track, Op::Log { a }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| -x);
        let track = self.tracked(a);
        self.push(value, false, track, Op::Neg { a })
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("needs rank-2 operands, got {:?} and {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let track = self.tracked(a) || self.tracked(b);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(value, false, track, Op::Matmul { a, b }))
    }

    // ── conv2d ──────────────────────────────────────────────────────────

    /// 2-D cross-correlation over NCHW input with zero padding.
    ///
    /// `w` is `[out_ch, in_ch, kh, kw]` with odd kernel extents, `b` is
    /// `[out_ch]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if vx.rank() != 4 || vw.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("needs NCHW input and OIHW kernel, got {:?} and {:?}", vx.shape(), vw.shape()),
            ));
        }
        let [n, c, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [oc, wc, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {wc} input channels, input has {c}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if vb.shape() != [oc] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {oc} output channels", vb.shape()),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input".to_string()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        // Accumulation runs (c, kh, kw)-major per output element, seeded from
        // the bias, so the summation order is fixed.
        let mut out = vec![T::zero(); n * oc * oh * ow];
        let (xd, wdat, bd) = (vx.data(), vw.data(), vb.data());
        for ni in 0..n {
            for oci in 0..oc {
                let obase = ((ni * oc) + oci) * oh * ow;
                out[obase..obase + oh * ow].fill(bd[oci]);
                for ci in 0..c {
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let wv = wdat[(((oci * c) + ci) * kh + khi) * kw + kwi];
                            for ohi in 0..oh {
                                let ih = (ohi * stride + khi) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = (((ni * c) + ci) * h + ih as usize) * wd;
                                let orow = obase + ohi * ow;
                                let (w0, w1) = valid_ow_range(ow, wd, stride, pad, kwi);
                                for owi in w0..w1 {
                                    let iw = owi * stride + kwi - pad;
                                    out[orow + owi] = out[orow + owi] + xd[xrow + iw] * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let track = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let value = Tensor::from_vec(vec![n, oc, oh, ow], out)?;
        Ok(self.push(value, false, track, Op::Conv2d { x, w, b, stride, pad }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
        }
        let out_shape: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).map(|d| va.shape()[d]).collect();
        let out_numel: usize = out_shape.iter().product();
        let group: usize = axes.iter().map(|&d| va.shape()[d]).product();
        let mut out = match kind {
            ReduceKind::Max => vec![T::neg_infinity(); out_numel],
            _ => vec![T::zero(); out_numel],
        };
        for_each_reduce(va.shape(), &axes, |i, oi| {
            let x = va.data()[i];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[oi] = out[oi] + x,
                ReduceKind::Max => {
                    if x > out[oi] {
                        out[oi] = x;
                    }
                }
            }
        });
        if kind == ReduceKind::Mean {
            let inv = T::one() / T::from_f64_lossy(group as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        let track = self.tracked(a);
        let value = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(value, false, track, Op::Reduce { a, kind, axes }))
    }

    /// Sum over the given axes; reduced axes are dropped from the shape.
    pub fn reduce_sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn reduce_max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    /// Sum of every element, producing a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.nodes[a.0].value.rank()).collect();
        self.reduce(ReduceKind::Sum, a, &axes)
    }

    // ── softmax ─────────────────────────────────────────────────────────

    /// Softmax along `axis`, stabilized by per-slice max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if !va.is_finite() {
            return Err(Error::domain("softmax", "non-finite input".to_string()));
        }
        let extent = va.shape()[axis];
        let inner: usize = va.shape()[axis + 1..].iter().product();
        let outer: usize = va.shape()[..axis].iter().product();
        let mut out = vec![T::zero(); va.numel()];
        let xd = va.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut mx = T::neg_infinity();
                for e in 0..extent {
                    let v = xd[base + e * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut total = T::zero();
                for e in 0..extent {
                    let ev = (xd[base + e * inner] - mx).exp();
                    out[base + e * inner] = ev;
                    total = total + ev;
                }
                for e in 0..extent {
                    out[base + e * inner] = out[base + e * inner] / total;
                }
            }
        }
        let track = self.tracked(a);
        let value = Tensor::from_vec(va.shape().to_vec(), out)?;
        Ok(self.push(value, false, track, Op::Softmax { a, axis }))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let track = self.tracked(a);
        Ok(self.push(value, false, track, Op::Reshape { a }))
    }

    /// Concatenation along `axis`; operands must agree on every other axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let rank = self.nodes[first.0].value.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut out_shape = self.nodes[first.0].value.shape().to_vec();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != rank
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != out_shape[d] && out_shape[d] != 0)
            {
                return Err(Error::shape("concat", format!("incompatible operand shape {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        for &p in parts {
            let vs = &self.nodes[p.0].value;
            let ext = vs.shape()[axis];
            for o in 0..outer {
                let src = &vs.data()[o * ext * inner..(o + 1) * ext * inner];
                let dst_base = (o * out_shape[axis] + offset) * inner;
                data[dst_base..dst_base + ext * inner].copy_from_slice(src);
            }
            offset += ext;
        }
        let track = parts.iter().any(|&p| self.tracked(p));
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, false, track, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        if start + len > va.shape()[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} exceeds extent {}", start, start + len, va.shape()[axis]),
            ));
        }
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = va.shape()[..axis].iter().product();
        let inner: usize = va.shape()[axis + 1..].iter().product();
        let ext = va.shape()[axis];
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for o in 0..outer {
            let src_base = (o * ext + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner].copy_from_slice(&va.data()[src_base..src_base + len * inner]);
        }
        let track = self.tracked(a);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, false, track, Op::Narrow { a, axis, start, len }))
    }

    /// Row gather along axis 0; backward scatter-adds into the source rows.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() == 0 {
            return Err(Error::shape("index_select", "rank-0 input"));
        }
        let rows = va.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", format!("index {bad} out of {rows} rows")));
        }
        let inner: usize = va.shape()[1..].iter().product();
        let mut out_shape = va.shape().to_vec();
        out_shape[0] = indices.len();
        let mut data = vec![T::zero(); indices.len() * inner];
        for (r, &i) in indices.iter().enumerate() {
            data[r * inner..(r + 1) * inner].copy_from_slice(&va.data()[i * inner..(i + 1) * inner]);
        }
        let track = self.tracked(a);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, false, track, Op::IndexSelect { a, indices: indices.to_vec() }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a rank-0 loss. Gradients of this call are added
    /// into each tracked node's persistent gradient, so calling twice
    /// without [`Tape::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.rank() != 0 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut flow: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        flow[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            if !self.nodes[i].track || flow[i].is_none() {
                continue;
            }
            let g = flow[i].take().expect("checked above");
            self.accumulate_persistent(i, &g);
            self.backprop_node(i, &g, &mut flow);
        }
        Ok(())
    }

    fn accumulate_persistent(&mut self, i: usize, g: &[T]) {
        let node = &mut self.nodes[i];
        match &mut node.grad {
            Some(existing) => {
                for (e, &gv) in existing.data_mut().iter_mut().zip(g) {
                    *e = *e + gv;
                }
            }
            None => {
                let t = Tensor::from_vec(node.value.shape().to_vec(), g.to_vec())
                    .expect("gradient shape matches value");
                node.grad = Some(t);
            }
        }
    }

    fn add_flow(&self, flow: &mut [Option<Vec<T>>], v: Var, contribution: &[T]) {
        if !self.nodes[v.0].track {
            return;
        }
        match &mut flow[v.0] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            None => flow[v.0] = Some(contribution.to_vec()),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T], flow: &mut [Option<Vec<T>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let out_shape = self.nodes[i].value.shape();
                let mut da = vec![T::zero(); va.numel()];
                let mut db = vec![T::zero(); vb.numel()];
                for_each_broadcast_pair(out_shape, va.shape(), vb.shape(), |o, ai, bi| {
                    let gv = g[o];
                    match kind {
                        BinaryKind::Add => {
                            da[ai] = da[ai] + gv;
                            db[bi] = db[bi] + gv;
                        }
                        BinaryKind::Sub => {
                            da[ai] = da[ai] + gv;
                            db[bi] = db[bi] - gv;
                        }
                        BinaryKind::Mul => {
                            da[ai] = da[ai] + gv * vb.data()[bi];
                            db[bi] = db[bi] + gv * va.data()[ai];
                        }
                        BinaryKind::Div => {
                            let d = vb.data()[bi];
                            da[ai] = da[ai] + gv / d;
                            db[bi] = db[bi] - gv * va.data()[ai] / (d * d);
                        }
                        BinaryKind::MaxWith => {
                            if va.data()[ai] >= vb.data()[bi] {
                                da[ai] = da[ai] + gv;
                            } else {
                                db[bi] = db[bi] + gv;
                            }
                        }
                    }
                });
                self.add_flow(flow, a, &da);
                self.add_flow(flow, b, &db);
            }
            Op::AddScalar { a } => self.add_flow(flow, a, g),
            Op::MulScalar { a, s } => {
                let da: Vec<T> = g.iter().map(|&gv| gv * s).collect();
                self.add_flow(flow, a, &da);
            }
            Op::MaxWithScalar { a, s } => {
                let va = &self.nodes[a.0].value;
                let da: Vec<T> = va
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x >= s { gv } else { T::zero() })
                    .collect();
                self.add_flow(flow, a, &da);
            }
            Op::Relu { a } => {
                let va = &self.nodes[a.0].value;
                let da: Vec<T> = va
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.add_flow(flow, a, &da);
            }
            Op::Sqrt { a } => {
                let out = &self.nodes[i].value;
                let half = T::from_f64_lossy(0.5);
                let da: Vec<T> = out.data().iter().zip(g).map(|(&y, &gv)| gv * half / y).collect();
                self.add_flow(flow, a, &da);
            }
            Op::Exp { a } => {
                let out = &self.nodes[i].value;
                let da: Vec<T> = out.data().iter().zip(g).map(|(&y, &gv)| gv * y).collect();
                self.add_flow(flow, a, &da);
            }
            Op::Log { a } => {
                let va = &self.nodes[a.0].value;
                let da: Vec<T> = va.data().iter().zip(g).map(|(&x, &gv)| gv / x).collect();
                self.add_flow(flow, a, &da);
            }
            Op::Neg { a } => {
                let da: Vec<T> = g.iter().map(|&gv| -gv).collect();
                self.add_flow(flow, a, &da);
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // da = g · bᵀ ; db = aᵀ · g
                let mut da = vec![T::zero(); m * k];
                for i2 in 0..m {
                    for j in 0..n {
                        let gv = g[i2 * n + j];
                        for k2 in 0..k {
                            da[i2 * k + k2] = da[i2 * k + k2] + gv * vb.data()[k2 * n + j];
                        }
                    }
                }
                let mut db = vec![T::zero(); k * n];
                for i2 in 0..m {
                    for k2 in 0..k {
                        let av = va.data()[i2 * k + k2];
                        for j in 0..n {
                            db[k2 * n + j] = db[k2 * n + j] + av * g[i2 * n + j];
                        }
                    }
                }
                self.add_flow(flow, a, &da);
                self.add_flow(flow, b, &db);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let [n, c, h, wd] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                let [oc, _, kh, kw] = [vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]];
                let out_shape = self.nodes[i].value.shape();
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dw = vec![T::zero(); vw.numel()];
                let mut db = vec![T::zero(); oc];
                let (xd, wdat) = (vx.data(), vw.data());
                for ni in 0..n {
                    for oci in 0..oc {
                        let obase = ((ni * oc) + oci) * oh * ow;
                        for gv in &g[obase..obase + oh * ow] {
                            db[oci] = db[oci] + *gv;
                        }
                        for ci in 0..c {
                            for khi in 0..kh {
                                for kwi in 0..kw {
                                    let widx = (((oci * c) + ci) * kh + khi) * kw + kwi;
                                    let wv = wdat[widx];
                                    let mut wacc = T::zero();
                                    for ohi in 0..oh {
                                        let ih = (ohi * stride + khi) as isize - pad as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let xrow = (((ni * c) + ci) * h + ih as usize) * wd;
                                        let orow = obase + ohi * ow;
                                        let (w0, w1) = valid_ow_range(ow, wd, stride, pad, kwi);
                                        for owi in w0..w1 {
                                            let iw = owi * stride + kwi - pad;
                                            let gv = g[orow + owi];
                                            dx[xrow + iw] = dx[xrow + iw] + gv * wv;
                                            wacc = wacc + gv * xd[xrow + iw];
                                        }
                                    }
                                    dw[widx] = dw[widx] + wacc;
                                }
                            }
                        }
                    }
                }
                self.add_flow(flow, x, &dx);
                self.add_flow(flow, w, &dw);
                self.add_flow(flow, b, &db);
            }
            Op::Reduce { a, kind, axes } => {
                let va = &self.nodes[a.0].value;
                let group: usize = axes.iter().map(|&d| va.shape()[d]).product();
                let mut da = vec![T::zero(); va.numel()];
                match kind {
                    ReduceKind::Sum => {
                        for_each_reduce(va.shape(), &axes, |i2, oi| {
                            da[i2] = g[oi];
                        });
                    }
                    ReduceKind::Mean => {
                        let inv = T::one() / T::from_f64_lossy(group as f64);
                        for_each_reduce(va.shape(), &axes, |i2, oi| {
                            da[i2] = g[oi] * inv;
                        });
                    }
                    ReduceKind::Max => {
                        // Route to the first attaining index per group.
                        let out_numel = self.nodes[i].value.numel();
                        let mut best = vec![T::neg_infinity(); out_numel];
                        let mut arg = vec![usize::MAX; out_numel];
                        for_each_reduce(va.shape(), &axes, |i2, oi| {
                            if va.data()[i2] > best[oi] {
                                best[oi] = va.data()[i2];
                                arg[oi] = i2;
                            }
                        });
                        for (oi, &i2) in arg.iter().enumerate() {
                            da[i2] = g[oi];
                        }
                    }
                }
                self.add_flow(flow, a, &da);
            }
            Op::Softmax { a, axis } => {
                let out = &self.nodes[i].value;
                let extent = out.shape()[axis];
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let outer: usize = out.shape()[..axis].iter().product();
                let mut da = vec![T::zero(); out.numel()];
                let yd = out.data();
                for o in 0..outer {
                    for i2 in 0..inner {
                        let base = o * extent * inner + i2;
                        let mut dot = T::zero();
                        for e in 0..extent {
                            let idx = base + e * inner;
                            dot = dot + g[idx] * yd[idx];
                        }
                        for e in 0..extent {
                            let idx = base + e * inner;
                            da[idx] = yd[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.add_flow(flow, a, &da);
            }
            Op::Reshape { a } => self.add_flow(flow, a, g),
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0usize;
                for &p in &parts {
                    let vs = &self.nodes[p.0].value;
                    let ext = vs.shape()[axis];
                    let mut dp = vec![T::zero(); vs.numel()];
                    for o in 0..outer {
                        let src_base = (o * out_shape[axis] + offset) * inner;
                        let dst_base = o * ext * inner;
                        dp[dst_base..dst_base + ext * inner]
                            .copy_from_slice(&g[src_base..src_base + ext * inner]);
                    }
                    self.add_flow(flow, p, &dp);
                    offset += ext;
                }
            }
            Op::Narrow { a, axis, start, len } => {
                let va = &self.nodes[a.0].value;
                let outer: usize = va.shape()[..axis].iter().product();
                let inner: usize = va.shape()[axis + 1..].iter().product();
                let ext = va.shape()[axis];
                let mut da = vec![T::zero(); va.numel()];
                for o in 0..outer {
                    let dst_base = (o * ext + start) * inner;
                    let src_base = o * len * inner;
                    da[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                self.add_flow(flow, a, &da);
            }
            Op::IndexSelect { a, indices } => {
                let va = &self.nodes[a.0].value;
                let inner: usize = va.shape()[1..].iter().product();
                let mut da = vec![T::zero(); va.numel()];
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..inner {
                        da[src * inner + k] = da[src * inner + k] + g[r * inner + k];
                    }
                }
                self.add_flow(flow, a, &da);
            }
        }
    }
}

/// Output columns whose input column `ow*stride + kw - pad` is in bounds.
#[inline]
fn valid_ow_range(ow: usize, width: usize, stride: usize, pad: usize, kwi: usize) -> (usize, usize) {
    let lo = if pad > kwi { (pad - kwi).div_ceil(stride) } else { 0 };
    let hi_input = width + pad;
    if hi_input <= kwi {
        return (0, 0);
    }
    let hi = ((hi_input - kwi - 1) / stride + 1).min(ow);
    (lo.min(hi), hi)
}

/// `a[m,k] @ b[k,n]` with ascending-k accumulation per output element.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for k2 in 0..k {
            let av = a[i * k + k2];
            let brow = &b[k2 * n..(k2 + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

/// Iterates a shape in row-major order, yielding `(input_flat, output_flat)`
/// where the output index skips the reduced axes.
fn for_each_reduce(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let numel: usize = shape.iter().product();
    if rank == 0 {
        if numel == 1 {
            f(0, 0);
        }
        return;
    }
    // contiguous trailing axes reduce whole inner runs per output element
    if !axes.is_empty() && axes[0] + axes.len() == rank && axes.windows(2).all(|w| w[1] == w[0] + 1) {
        let inner: usize = shape[axes[0]..].iter().product();
        let outer = numel / inner;
        for o in 0..outer {
            let base = o * inner;
            for j in 0..inner {
                f(base + j, o);
            }
        }
        return;
    }
    // Output strides: zero on reduced axes.
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        if !axes.contains(&d) {
            out_strides[d] = acc;
            acc *= shape[d];
        }
    }
    let mut coords = vec![0usize; rank];
    let mut oi = 0usize;
    for i in 0..numel {
        f(i, oi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            oi += out_strides[d];
            if coords[d] < shape[d] {
                break;
            }
            oi -= out_strides[d] * shape[d];
            coords[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_by_zero_scalar_annihilates() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[2.0, 3.0]));
        let r = tape.mul_scalar(a, 0.0);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_broadcastable_shapes_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn div_by_exact_zero_and_log_of_nonpositive_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 1.0]));
        let z = tape.leaf(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::Domain { .. })));
        let neg = tape.leaf(t(&[1], &[0.0]));
        assert!(matches!(tape.log(neg), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let bad = tape.leaf(t(&[3, 1], &[0.0; 3]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn matmul_grad_of_sum_matches_row_sums() {
        // loss = sum(A·B) at A=I2, B=[[2,3],[4,5]]; dA[i][k] = sum_j B[k][j]
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let v = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape.reduce_mean(v, &[0]).unwrap();
        assert_eq!(tape.value(m).item(), 2.5);

        let mat = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.reduce_sum(mat, &[1]).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);

        assert!(matches!(tape.reduce_sum(mat, &[5]), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn reduce_max_ties_route_to_first_index() {
        let mut tape = Tape::new();
        let v = tape.param(t(&[3], &[2.0, 5.0, 5.0]));
        let m = tape.reduce_max(v, &[0]).unwrap();
        assert_eq!(tape.value(m).item(), 5.0);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[4], &[0.0; 4]));
        let s = tape.softmax(z, 0).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }

        let big = tape.leaf(t(&[2], &[1000.0, 0.0]));
        let s2 = tape.softmax(big, 0).unwrap();
        let d = tape.value(s2).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
        assert!(d.iter().all(|v| v.is_finite()));

        let nan = tape.leaf(t(&[1], &[f64::NAN]));
        assert!(tape.softmax(nan, 0).is_err());
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[0.5; 6]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 6]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn conv2d_all_ones_counts_overlap() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        let w = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let d = tape.value(y).data();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(d[4], 9.0); // center: full 3x3 overlap
        for corner in [0, 2, 6, 8] {
            assert_eq!(d[corner], 4.0);
        }
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
        let w_badc = tape.leaf(Tensor::zeros(vec![1, 3, 3, 3]));
        let w_even = tape.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        assert!(tape.conv2d(x, w_badc, b, 1, 1).is_err());
        assert!(tape.conv2d(x, w_even, b, 1, 1).is_err());
    }

    #[test]
    fn narrow_concat_index_select_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let left = tape.narrow(x, 1, 0, 2).unwrap();
        let right = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());

        let swapped = tape.index_select(x, &[1, 0]).unwrap();
        assert_eq!(tape.value(swapped).row(0), &[4.0, 5.0, 6.0, 7.0]);
        assert_eq!(tape.value(swapped).row(1), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[3.0, 4.0]));
        let d = tape.detach(x);
        let y = tape.mul(d, d).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn untracked_graph_records_but_skips_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.add_scalar(a, 1.0);
        // Nothing requires grad; backward over an unrelated scalar param
        // leaves these untouched.
        let p = tape.param(Tensor::scalar(2.0));
        let loss = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(loss).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(p).unwrap().item(), 4.0);
    }
}
