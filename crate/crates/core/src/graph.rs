//! Reverse-mode automatic differentiation over coarse tensor operations.
//!
//! A [`Graph`] records every operation applied to its variables; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. Parameters are
//! bound lazily from a [`ParamStore`] and their gradients are reported back
//! by [`ParamId`].

use std::rc::Rc;

use crate::error::{config_err, ensure_config, Result};
use crate::params::{ParamId, ParamStore};
use crate::selective_scan::{scan_backward, scan_chunked, sigmoid, softplus, ScanArgs};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sentinel index for [`Graph::gather_rows`]: the output row is zero.
pub const ZERO_ROW: usize = usize::MAX;

/// Chunk length used by the scan operation's forward kernel.
pub const SCAN_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Silu,
    Softplus,
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Tanh => T::one() - y * y,
            Unary::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Slice { x: Var, start: usize, width: usize },
    Concat(Var, Var),
    Gather { x: Var, index: Rc<[usize]>, row: usize },
    DepthwiseConv { x: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Scan { u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var },
    Reshape(Var),
    MseLoss { pred: Var, target: Var },
    Dot { x: Var, weights: Rc<[T]> },
    Sum(Vec<Var>),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    ksize: usize,
    dilation: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph that records what is needed for [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, param_vars: vec![None; params.len()], nodes: Vec::new(), grad_enabled: true }
    }

    /// A forward-only graph. Intermediate values may be discarded with
    /// [`Graph::truncate`].
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Graph { grad_enabled: false, ..Self::new(params) }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, reusing the binding within this graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.variable(self.params.get(id).clone());
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Drops every node recorded after `mark`. Only valid on inference
    /// graphs; handles at or past `mark` become dangling.
    pub fn truncate(&mut self, mark: usize) {
        assert!(!self.grad_enabled, "truncate on a recording graph");
        self.nodes.truncate(mark);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= mark) {
                *slot = None;
            }
        }
    }

    /// Replaces a value by a fresh leaf holding a copy of it, then truncates
    /// everything recorded after `mark` (inference graphs only).
    pub fn collapse(&mut self, mark: usize, v: Var) -> Var {
        if self.grad_enabled || v.0 < mark {
            return v;
        }
        let value = self.nodes[v.0].value.clone();
        self.truncate(mark);
        self.constant(value)
    }

    // ---- operations -----------------------------------------------------

    /// `x·w (+ b)` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        ensure_config!(ws.rank() == 2, "linear weight must be rank 2, got {:?}", ws.shape());
        let (din, dout) = (ws.shape()[0], ws.shape()[1]);
        ensure_config!(xs.last_dim() == din && xs.rank() >= 1, "linear expects last dim {din}, got {:?}", xs.shape());
        let rows = xs.len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bs = self.value(b);
            ensure_config!(bs.shape() == [dout], "bias shape {:?} != [{dout}]", bs.shape());
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bs.data());
            }
        }
        gemm(MatRef::new(xs.data(), rows, din), MatRef::new(ws.data(), din, dout), T::one(), &mut out);
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let value = Tensor::from_vec(&shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k), &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Unary(x, kind), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        ensure_config!(self.value(gamma).shape() == [c], "gamma shape mismatch");
        ensure_config!(self.value(beta).shape() == [c], "beta shape mismatch");
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / c;
        let inv_c = T::lit(1.0 / c as f64);
        let eps = T::lit(eps);
        let mut out = Vec::with_capacity(xs.len());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in xs.data().chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + bt[j]);
            }
        }
        let value = Tensor::from_vec(xs.shape(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Columns `[start, start+width)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.value(x);
        let c = xs.last_dim();
        ensure_config!(start + width <= c, "slice {start}+{width} exceeds {c}");
        let data: Vec<T> = xs.data().chunks_exact(c).flat_map(|r| r[start..start + width].iter().copied()).collect();
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(value, Op::Slice { x, start, width }, &[x]))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ca, cb) = (av.last_dim(), bv.last_dim());
        ensure_config!(
            av.shape()[..av.rank() - 1] == bv.shape()[..bv.rank() - 1],
            "concat leading dims differ: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = ca + cb;
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Row gather: viewing `x` as rows of `row` scalars, output row `i` is
    /// input row `index[i]`, or zeros for [`ZERO_ROW`].
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>, row: usize, shape: &[usize]) -> Result<Var> {
        let xs = self.value(x);
        ensure_config!(row >= 1 && xs.len() % row == 0, "row size {row} does not divide input");
        ensure_config!(
            shape.iter().product::<usize>() == index.len() * row,
            "gather output shape {shape:?} != {} rows of {row}",
            index.len()
        );
        let nrows = xs.len() / row;
        let mut data = vec![T::zero(); index.len() * row];
        for (dst, &src) in data.chunks_exact_mut(row).zip(index.iter()) {
            if src != ZERO_ROW {
                ensure_config!(src < nrows, "gather index {src} out of range {nrows}");
                dst.copy_from_slice(&xs.data()[src * row..(src + 1) * row]);
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(value, Op::Gather { x, index, row }, &[x]))
    }

    /// Depth-wise 2D convolution on `[B, H, W, C]` with zero "same" padding.
    /// `kernel` is `[k·k, C]` (tap-major), `bias` is `[C]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var, ksize: usize, dilation: usize) -> Result<Var> {
        let xs = self.value(x);
        ensure_config!(xs.rank() == 4, "depthwise conv expects [B,H,W,C], got {:?}", xs.shape());
        ensure_config!(ksize % 2 == 1 && dilation >= 1, "kernel size must be odd");
        let s = xs.shape();
        let geom = ConvGeom { batch: s[0], height: s[1], width: s[2], channels: s[3], ksize, dilation };
        ensure_config!(
            self.value(kernel).shape() == [ksize * ksize, geom.channels],
            "kernel shape {:?}",
            self.value(kernel).shape()
        );
        ensure_config!(self.value(bias).shape() == [geom.channels], "conv bias shape mismatch");
        let out = dw_conv_forward(xs.data(), self.value(kernel).data(), self.value(bias).data(), geom);
        let value = Tensor::from_vec(s, out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, kernel, bias, geom }, &[x, kernel, bias]))
    }

    /// Selective scan with `A = -exp(a_log)`; shapes as in
    /// [`ScanArgs`](crate::selective_scan::ScanArgs).
    pub fn selective_scan(&mut self, u: Var, delta: Var, a_log: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let a = self.value(a_log).map(|v| -v.exp());
        let us = self.value(u);
        ensure_config!(us.rank() == 3, "scan input must be [B, L, E]");
        let (batch, len, channels) = (us.shape()[0], us.shape()[1], us.shape()[2]);
        let state = a.last_dim();
        ensure_config!(a.shape() == [channels, state], "a_log shape {:?}", a.shape());
        for (v, want) in [(delta, channels), (b, state), (c, state)] {
            ensure_config!(
                self.value(v).shape() == [batch, len, want],
                "scan operand shape {:?}",
                self.value(v).shape()
            );
        }
        ensure_config!(self.value(d).shape() == [channels], "D shape mismatch");
        let args = ScanArgs {
            u: us.data(),
            delta: self.value(delta).data(),
            a: a.data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
            batch,
            len,
            channels,
            state,
        };
        let y = scan_chunked(&args, SCAN_CHUNK)?;
        let value = Tensor::from_vec(us.shape(), y)?;
        Ok(self.push(value, Op::Scan { u, delta, a_log, b, c, d }, &[u, delta, a_log, b, c, d]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean squared error as a scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.check_same_shape(t)?;
        ensure_config!(!p.is_empty(), "mse of empty tensors");
        let n = T::lit(p.len() as f64);
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::MseLoss { pred, target }, &[pred, target]))
    }

    /// `Σ x ⊙ weights` as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: Rc<[T]>) -> Result<Var> {
        let xs = self.value(x);
        ensure_config!(xs.len() == weights.len(), "dot weights length mismatch");
        let s: T = xs.data().iter().zip(weights.iter()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, &[x]))
    }

    /// Sum of equally shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| config_err("sum of nothing"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            let pv = self.value(p);
            acc.check_same_shape(pv)?;
            for (a, &b) in acc.data_mut().iter_mut().zip(pv.data()) {
                *a += b;
            }
        }
        Ok(self.push(acc, Op::Sum(parts.to_vec()), parts))
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure_config!(self.grad_enabled, "backward on an inference graph");
        ensure_config!(self.value(loss).len() == 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        let params = self.param_vars.iter().map(|slot| slot.and_then(|v| grads[v.0].clone())).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (din, dout) = (ws.shape()[0], ws.shape()[1]);
                let rows = xs.len() / din;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(MatRef::new(go, rows, dout), MatRef::new(ws.data(), din, dout).t(), T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::from_vec(xs.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(MatRef::new(xs.data(), rows, din).t(), MatRef::new(go, rows, dout), T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(ws.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in go.chunks_exact(dout) {
                            for (a, &g) in db.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[dout], db)?);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, gout.zip_map(bv, |g, y| g * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gout.zip_map(av, |g, x| g * x)?);
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                self.accumulate(grads, *x, gout.map(|g| g * k));
            }
            Op::Unary(x, kind) => {
                let xs = self.value(*x);
                let data = go
                    .iter()
                    .zip(xs.data())
                    .zip(node.value.data())
                    .map(|((&g, &xv), &yv)| g * kind.deriv(xv, yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xs.shape(), data)?);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*x).last_dim();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); go.len()];
                let inv_c = T::lit(1.0 / c as f64);
                for (r, ((grow, xh), dxr)) in
                    go.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(dx.chunks_exact_mut(c)).enumerate()
                {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        dgamma[j] += grow[j] * xh[j];
                        dbeta[j] += grow[j];
                        let dxh = grow[j] * g[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    for j in 0..c {
                        dxr[j] = rstd[r] * (grow[j] * g[j] - m1 - xh[j] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(gout.shape(), dx)?);
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::Slice { x, start, width } => {
                let xs = self.value(*x);
                let c = xs.last_dim();
                let mut dx = vec![T::zero(); xs.len()];
                for (drow, grow) in dx.chunks_exact_mut(c).zip(go.chunks_exact(*width)) {
                    drow[*start..*start + *width].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs.shape(), dx)?);
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ca, cb) = (av.last_dim(), bv.last_dim());
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in go.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da)?);
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db)?);
            }
            Op::Gather { x, index, row } => {
                let xs = self.value(*x);
                let mut dx = vec![T::zero(); xs.len()];
                for (grow, &src) in go.chunks_exact(*row).zip(index.iter()) {
                    if src != ZERO_ROW {
                        for (d, &g) in dx[src * row..(src + 1) * row].iter_mut().zip(grow) {
                            *d += g;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs.shape(), dx)?);
            }
            Op::DepthwiseConv { x, kernel, bias, geom } => {
                let (dx, dk, db) = dw_conv_backward(self.value(*x).data(), self.value(*kernel).data(), go, *geom);
                self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx)?);
                self.accumulate(grads, *kernel, Tensor::from_vec(self.value(*kernel).shape(), dk)?);
                self.accumulate(grads, *bias, Tensor::from_vec(&[geom.channels], db)?);
            }
            Op::Scan { u, delta, a_log, b, c, d } => {
                let a_log_v = self.value(*a_log);
                let a = a_log_v.map(|v| -v.exp());
                let us = self.value(*u);
                let (batch, len, channels) = (us.shape()[0], us.shape()[1], us.shape()[2]);
                let args = ScanArgs {
                    u: us.data(),
                    delta: self.value(*delta).data(),
                    a: a.data(),
                    b: self.value(*b).data(),
                    c: self.value(*c).data(),
                    d: self.value(*d).data(),
                    batch,
                    len,
                    channels,
                    state: a.last_dim(),
                };
                let sg = scan_backward(&args, go)?;
                // dA_log = dA · dA/dA_log = dA · A
                let da_log: Vec<T> = sg.a.iter().zip(a.data()).map(|(&g, &av)| g * av).collect();
                self.accumulate(grads, *u, Tensor::from_vec(us.shape(), sg.u)?);
                self.accumulate(grads, *delta, Tensor::from_vec(us.shape(), sg.delta)?);
                self.accumulate(grads, *a_log, Tensor::from_vec(a_log_v.shape(), da_log)?);
                self.accumulate(grads, *b, Tensor::from_vec(self.value(*b).shape(), sg.b)?);
                self.accumulate(grads, *c, Tensor::from_vec(self.value(*c).shape(), sg.c)?);
                self.accumulate(grads, *d, Tensor::from_vec(&[channels], sg.d)?);
            }
            Op::Reshape(x) => {
                let g = gout.clone().reshape(self.value(*x).shape())?;
                self.accumulate(grads, *x, g);
            }
            Op::MseLoss { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let k = go[0] * T::lit(2.0 / p.len() as f64);
                let dp = p.zip_map(t, |a, b| k * (a - b))?;
                if self.needs(*target) {
                    self.accumulate(grads, *target, dp.map(|g| -g));
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::Dot { x, weights } => {
                let xs = self.value(*x);
                let data = weights.iter().map(|&w| w * go[0]).collect();
                self.accumulate(grads, *x, Tensor::from_vec(xs.shape(), data)?);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, gout.clone());
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf variable (see [`Graph::variable`]).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a stored parameter (`None` if unused).
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Per-parameter gradients in store order.
    pub fn into_param_grads(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

fn dw_conv_forward<T: Real>(x: &[T], k: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    let ConvGeom { batch, height, width, channels: c, ksize, dilation } = g;
    let r = (ksize / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for i in 0..height {
            for j in 0..width {
                let o = ((b * height + i) * width + j) * c;
                out[o..o + c].copy_from_slice(bias);
                for ki in 0..ksize {
                    let si = i as isize + (ki as isize - r) * dilation as isize;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for kj in 0..ksize {
                        let sj = j as isize + (kj as isize - r) * dilation as isize;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        let s = ((b * height + si as usize) * width + sj as usize) * c;
                        let kr = &k[(ki * ksize + kj) * c..(ki * ksize + kj + 1) * c];
                        for ch in 0..c {
                            out[o + ch] += kr[ch] * x[s + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_conv_backward<T: Real>(x: &[T], k: &[T], gout: &[T], g: ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvGeom { batch, height, width, channels: c, ksize, dilation } = g;
    let r = (ksize / 2) as isize;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); c];
    for b in 0..batch {
        for i in 0..height {
            for j in 0..width {
                let o = ((b * height + i) * width + j) * c;
                for ch in 0..c {
                    db[ch] += gout[o + ch];
                }
                for ki in 0..ksize {
                    let si = i as isize + (ki as isize - r) * dilation as isize;
                    if si < 0 || si >= height as isize {
                        continue;
                    }
                    for kj in 0..ksize {
                        let sj = j as isize + (kj as isize - r) * dilation as isize;
                        if sj < 0 || sj >= width as isize {
                            continue;
                        }
                        let s = ((b * height + si as usize) * width + sj as usize) * c;
                        let tap = (ki * ksize + kj) * c;
                        for ch in 0..c {
                            dx[s + ch] += k[tap + ch] * gout[o + ch];
                            dk[tap + ch] += x[s + ch] * gout[o + ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}
