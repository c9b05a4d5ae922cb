//! Selective state-space scan over 1D token sequences.
//!
//! For every channel `e` and state index `n` the recurrence is
//!
//! ```text
//! Ā[t,e,n] = exp(Δ[t,e] · A[e,n])
//! h[t,e,n] = Ā[t,e,n] · h[t-1,e,n] + (Δ[t,e] · u[t,e]) · B[t,n]
//! y[t,e]   = Σ_n C[t,n] · h[t,e,n] + D[e] · u[t,e]
//! ```
//!
//! with `h[-1] = 0`. `Δ`, `B` and `C` are functions of the input token (see
//! [`make_selective_params`]); `A = -exp(a_log)` is strictly negative.
//!
//! Two forward kernels share the exact same per-element arithmetic:
//! [`scan_sequential`] walks one channel at a time and is the reference;
//! [`scan_chunked`] walks time in blocks over all channels at once, which keeps
//! memory access contiguous. Their outputs are bitwise identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, ensure_config, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Value-level parameters of one S6 direction.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams<T> {
    /// `[E, N]` log-magnitude of the (negative) state matrix.
    pub a_log: Tensor<T>,
    /// `[E]` skip coefficient.
    pub d: Tensor<T>,
    /// `[E, R]` first factor of the Δ projection.
    pub delta_down: Tensor<T>,
    /// `[R, E]` second factor of the Δ projection.
    pub delta_up: Tensor<T>,
    /// `[E]` offset added before the softplus.
    pub delta_bias: Tensor<T>,
    /// `[E, 2N]` projection producing `B` (first `N` columns) and `C`.
    pub bc_weight: Tensor<T>,
    /// `[2N]`
    pub bc_bias: Tensor<T>,
}

impl<T: Real> SelectiveParams<T> {
    /// Zero projections, `A = -1`, `D = 0`, rank-1 Δ projection.
    pub fn zeros(channels: usize, state_dim: usize) -> Self {
        SelectiveParams {
            a_log: Tensor::zeros(&[channels, state_dim]),
            d: Tensor::zeros(&[channels]),
            delta_down: Tensor::zeros(&[channels, 1]),
            delta_up: Tensor::zeros(&[1, channels]),
            delta_bias: Tensor::zeros(&[channels]),
            bc_weight: Tensor::zeros(&[channels, 2 * state_dim]),
            bc_bias: Tensor::zeros(&[2 * state_dim]),
        }
    }

    pub fn channels(&self) -> usize {
        self.d.len()
    }

    pub fn cast<U: Real>(&self) -> SelectiveParams<U> {
        SelectiveParams {
            a_log: self.a_log.cast(),
            d: self.d.cast(),
            delta_down: self.delta_down.cast(),
            delta_up: self.delta_up.cast(),
            delta_bias: self.delta_bias.cast(),
            bc_weight: self.bc_weight.cast(),
            bc_bias: self.bc_bias.cast(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a_log.last_dim()
    }

    /// Effective state matrix `A = -exp(a_log)`.
    pub fn a_matrix(&self) -> Tensor<T> {
        self.a_log.map(|x| -x.exp())
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.channels();
        let n = self.state_dim();
        let r = self.delta_down.last_dim();
        ensure_config!(self.a_log.shape() == [e, n], "a_log shape {:?}", self.a_log.shape());
        ensure_config!(self.delta_down.shape() == [e, r], "delta_down shape {:?}", self.delta_down.shape());
        ensure_config!(self.delta_up.shape() == [r, e], "delta_up shape {:?}", self.delta_up.shape());
        ensure_config!(self.delta_bias.shape() == [e], "delta_bias shape {:?}", self.delta_bias.shape());
        ensure_config!(self.bc_weight.shape() == [e, 2 * n], "bc_weight shape {:?}", self.bc_weight.shape());
        ensure_config!(self.bc_bias.shape() == [2 * n], "bc_bias shape {:?}", self.bc_bias.shape());
        Ok(())
    }
}

/// Input-dependent scan inputs produced from a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveInputs<T> {
    /// `[batch, L, E]`, strictly positive.
    pub delta: Tensor<T>,
    /// `[batch, L, N]`
    pub b: Tensor<T>,
    /// `[batch, L, N]`
    pub c: Tensor<T>,
}

/// Numerically safe `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_sequence<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    ensure_config!(
        x.rank() == 3 && x.shape()[2] == channels,
        "expected token sequence [batch, L, {channels}], got {:?}",
        x.shape()
    );
    ensure_config!(x.shape()[1] >= 1, "sequence length must be at least 1");
    if let Some(i) = x.first_non_finite() {
        return Err(Error::Numeric { what: "non-finite input token".into(), index: i });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Computes `Δ = softplus(x·W_down·W_up + bias)` and `[B | C] = x·W_bc + b_bc`.
pub fn make_selective_params<T: Real>(x: &Tensor<T>, p: &SelectiveParams<T>) -> Result<SelectiveInputs<T>> {
    p.validate()?;
    let e = p.channels();
    let n = p.state_dim();
    let r = p.delta_down.last_dim();
    let (batch, len) = check_sequence(x, e)?;
    let rows = batch * len;

    let mut low = vec![T::zero(); rows * r];
    gemm(MatRef::new(x.data(), rows, e), MatRef::new(p.delta_down.data(), e, r), T::zero(), &mut low);
    let mut delta = vec![T::zero(); rows * e];
    gemm(MatRef::new(&low, rows, r), MatRef::new(p.delta_up.data(), r, e), T::zero(), &mut delta);
    for row in delta.chunks_exact_mut(e) {
        for (v, &bias) in row.iter_mut().zip(p.delta_bias.data()) {
            *v = softplus(*v + bias);
        }
    }

    let mut bc = vec![T::zero(); rows * 2 * n];
    gemm(MatRef::new(x.data(), rows, e), MatRef::new(p.bc_weight.data(), e, 2 * n), T::zero(), &mut bc);
    let mut b = Vec::with_capacity(rows * n);
    let mut c = Vec::with_capacity(rows * n);
    for row in bc.chunks_exact(2 * n) {
        b.extend(row[..n].iter().zip(&p.bc_bias.data()[..n]).map(|(&v, &o)| v + o));
        c.extend(row[n..].iter().zip(&p.bc_bias.data()[n..]).map(|(&v, &o)| v + o));
    }
    Ok(SelectiveInputs {
        delta: Tensor::from_vec(&[batch, len, e], delta)?,
        b: Tensor::from_vec(&[batch, len, n], b)?,
        c: Tensor::from_vec(&[batch, len, n], c)?,
    })
}

/// Zero-order hold for the state transition, Euler for the input term.
///
/// `delta` is `[..., E]`, `a` is `[E, N]` and `b` is `[..., N]` with the same
/// leading dimensions; returns `(Ā, B̄)`, both `[..., E, N]`.
pub fn discretize<T: Real>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure_config!(a.rank() == 2, "A must be [E, N], got {:?}", a.shape());
    let (e, n) = (a.shape()[0], a.shape()[1]);
    ensure_config!(delta.last_dim() == e, "delta last dim {} != {e}", delta.last_dim());
    ensure_config!(b.last_dim() == n, "B last dim {} != {n}", b.last_dim());
    let lead = &delta.shape()[..delta.rank().saturating_sub(1)];
    ensure_config!(
        lead == &b.shape()[..b.rank().saturating_sub(1)],
        "delta and B leading dims differ: {:?} vs {:?}",
        delta.shape(),
        b.shape()
    );
    if let Some(i) = delta.data().iter().position(|&d| !(d > T::zero())) {
        return Err(Error::Numeric { what: "non-positive delta".into(), index: i });
    }
    let rows = delta.len() / e;
    let mut a_bar = Vec::with_capacity(rows * e * n);
    let mut b_bar = Vec::with_capacity(rows * e * n);
    for r in 0..rows {
        for ch in 0..e {
            let dt = delta.data()[r * e + ch];
            for s in 0..n {
                a_bar.push((dt * a.data()[ch * n + s]).exp());
                b_bar.push(dt * b.data()[r * n + s]);
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.extend_from_slice(&[e, n]);
    Ok((Tensor::from_vec(&shape, a_bar)?, Tensor::from_vec(&shape, b_bar)?))
}

/// Borrowed, flattened operands of one scan.
#[derive(Clone, Copy, Debug)]
pub struct ScanArgs<'a, T> {
    /// `[batch, len, channels]`
    pub u: &'a [T],
    /// `[batch, len, channels]`
    pub delta: &'a [T],
    /// Effective state matrix `[channels, state]`.
    pub a: &'a [T],
    /// `[batch, len, state]`
    pub b: &'a [T],
    /// `[batch, len, state]`
    pub c: &'a [T],
    /// `[channels]`
    pub d: &'a [T],
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl<'a, T: Real> ScanArgs<'a, T> {
    /// Builds scan operands from tensors, validating shapes.
    pub fn from_tensors(
        u: &'a Tensor<T>,
        inputs: &'a SelectiveInputs<T>,
        a: &'a Tensor<T>,
        d: &'a Tensor<T>,
    ) -> Result<Self> {
        ensure_config!(u.rank() == 3, "u must be [batch, L, E], got {:?}", u.shape());
        let (batch, len, channels) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        ensure_config!(a.rank() == 2 && a.shape()[0] == channels, "A shape {:?}", a.shape());
        let state = a.shape()[1];
        ensure_config!(inputs.delta.shape() == u.shape(), "delta shape {:?}", inputs.delta.shape());
        ensure_config!(inputs.b.shape() == [batch, len, state], "B shape {:?}", inputs.b.shape());
        ensure_config!(inputs.c.shape() == [batch, len, state], "C shape {:?}", inputs.c.shape());
        ensure_config!(d.shape() == [channels], "D shape {:?}", d.shape());
        let args = ScanArgs {
            u: u.data(),
            delta: inputs.delta.data(),
            a: a.data(),
            b: inputs.b.data(),
            c: inputs.c.data(),
            d: d.data(),
            batch,
            len,
            channels,
            state,
        };
        Ok(args)
    }

    fn check(&self) -> Result<()> {
        let (bl, e, n) = (self.batch * self.len, self.channels, self.state);
        ensure_config!(self.len >= 1, "sequence length must be at least 1");
        ensure_config!(self.u.len() == bl * e && self.delta.len() == bl * e, "u/delta length mismatch");
        ensure_config!(self.a.len() == e * n && self.d.len() == e, "A/D length mismatch");
        ensure_config!(self.b.len() == bl * n && self.c.len() == bl * n, "B/C length mismatch");
        if let Some(i) = self.u.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric { what: "non-finite scan input".into(), index: i });
        }
        Ok(())
    }
}

/// Single state update shared by every kernel so that all of them round
/// identically.
#[inline(always)]
fn update<T: Real>(h: T, a_bar: T, delta_u: T, b: T) -> T {
    a_bar * h + delta_u * b
}

fn non_finite_step(step: usize) -> Error {
    Error::Numeric { what: "non-finite scan output".into(), index: step }
}

/// Reference kernel: one channel at a time, one step at a time.
pub fn scan_sequential<T: Real>(args: &ScanArgs<'_, T>) -> Result<Vec<T>> {
    args.check()?;
    let ScanArgs { u, delta, a, b, c, d, batch, len, channels: e, state: n } = *args;
    let mut y = vec![T::zero(); batch * len * e];
    let mut h = vec![T::zero(); n];
    for bi in 0..batch {
        for ch in 0..e {
            h.iter_mut().for_each(|v| *v = T::zero());
            let a_row = &a[ch * n..(ch + 1) * n];
            for t in 0..len {
                let row = bi * len + t;
                let (dt, ut) = (delta[row * e + ch], u[row * e + ch]);
                let du = dt * ut;
                let (b_t, c_t) = (&b[row * n..(row + 1) * n], &c[row * n..(row + 1) * n]);
                let mut acc = T::zero();
                for s in 0..n {
                    h[s] = update(h[s], (dt * a_row[s]).exp_kernel(), du, b_t[s]);
                    acc += c_t[s] * h[s];
                }
                let out = acc + d[ch] * ut;
                if !out.is_finite() {
                    return Err(non_finite_step(t));
                }
                y[row * e + ch] = out;
            }
        }
    }
    Ok(y)
}

/// Blocked kernel: the transition factors of `chunk_len` steps are computed
/// in one pass, then the recurrence sweeps all channels per step. State is
/// carried exactly across chunk boundaries.
pub fn scan_chunked<T: Real>(args: &ScanArgs<'_, T>, chunk_len: usize) -> Result<Vec<T>> {
    ensure_config!(chunk_len >= 1, "chunk_len must be at least 1");
    args.check()?;
    let ScanArgs { u, delta, a, b, c, d, batch, len, channels: e, state: n } = *args;
    let chunk_len = chunk_len.min(len);
    let en = e * n;
    let mut y = vec![T::zero(); batch * len * e];
    let mut h = vec![T::zero(); en];
    let mut a_bar = vec![T::zero(); chunk_len * en];
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = T::zero());
        let mut start = 0;
        while start < len {
            let stop = (start + chunk_len).min(len);
            for t in start..stop {
                let row = bi * len + t;
                let dst = &mut a_bar[(t - start) * en..(t - start + 1) * en];
                for ch in 0..e {
                    let dt = delta[row * e + ch];
                    let a_row = &a[ch * n..(ch + 1) * n];
                    for (o, &av) in dst[ch * n..(ch + 1) * n].iter_mut().zip(a_row) {
                        *o = (dt * av).exp_kernel();
                    }
                }
            }
            for t in start..stop {
                let row = bi * len + t;
                let (b_t, c_t) = (&b[row * n..(row + 1) * n], &c[row * n..(row + 1) * n]);
                let ab = &a_bar[(t - start) * en..(t - start + 1) * en];
                let (u_t, dt_t) = (&u[row * e..(row + 1) * e], &delta[row * e..(row + 1) * e]);
                let y_t = &mut y[row * e..(row + 1) * e];
                for ch in 0..e {
                    let du = dt_t[ch] * u_t[ch];
                    let hs = &mut h[ch * n..(ch + 1) * n];
                    let abs = &ab[ch * n..(ch + 1) * n];
                    assert!(hs.len() == n && abs.len() == n && b_t.len() == n && c_t.len() == n);
                    for s in 0..n {
                        hs[s] = update(hs[s], abs[s], du, b_t[s]);
                    }
                    let mut acc = T::zero();
                    for s in 0..n {
                        acc += c_t[s] * hs[s];
                    }
                    let out = acc + d[ch] * u_t[ch];
                    if !out.is_finite() {
                        return Err(non_finite_step(t));
                    }
                    y_t[ch] = out;
                }
            }
            start = stop;
        }
    }
    Ok(y)
}

/// Gradients of a scalar loss with respect to every scan operand.
#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    /// With respect to the effective `A` (not `a_log`).
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

/// Reverse-mode pass through the scan given `dy = ∂loss/∂y`.
///
/// States are recomputed per batch entry rather than kept from the forward
/// pass, so memory stays at `len·channels·state` regardless of batch size.
pub fn scan_backward<T: Real>(args: &ScanArgs<'_, T>, dy: &[T]) -> Result<ScanGrads<T>> {
    args.check()?;
    let ScanArgs { u, delta, a, b, c, d, batch, len, channels: e, state: n } = *args;
    ensure_config!(dy.len() == u.len(), "dy length {} != {}", dy.len(), u.len());
    let en = e * n;
    let mut g = ScanGrads {
        u: vec![T::zero(); u.len()],
        delta: vec![T::zero(); u.len()],
        a: vec![T::zero(); en],
        b: vec![T::zero(); b.len()],
        c: vec![T::zero(); c.len()],
        d: vec![T::zero(); e],
    };
    let zeros = vec![T::zero(); en];
    let mut hs = vec![T::zero(); len * en];
    let mut a_bars = vec![T::zero(); len * en];
    let mut carry = vec![T::zero(); en];
    let mut dd_terms = vec![T::zero(); n];
    let mut du_terms = vec![T::zero(); n];
    for bi in 0..batch {
        // Forward recompute, same arithmetic as the forward kernels.
        for t in 0..len {
            let row = bi * len + t;
            let b_t = &b[row * n..(row + 1) * n];
            let (done, rest) = hs.split_at_mut(t * en);
            let prev_all: &[T] = if t > 0 { &done[(t - 1) * en..] } else { &zeros };
            let h_t = &mut rest[..en];
            let ab_t = &mut a_bars[t * en..(t + 1) * en];
            for ch in 0..e {
                let dt = delta[row * e + ch];
                let du = dt * u[row * e + ch];
                let r = ch * n..(ch + 1) * n;
                let ab = &mut ab_t[r.clone()];
                for (o, &av) in ab.iter_mut().zip(&a[r.clone()]) {
                    *o = (dt * av).exp_kernel();
                }
                let (hc, pc) = (&mut h_t[r.clone()], &prev_all[r]);
                assert!(hc.len() == n && pc.len() == n && ab.len() == n && b_t.len() == n);
                for s in 0..n {
                    hc[s] = update(pc[s], ab[s], du, b_t[s]);
                }
            }
        }
        carry.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let row = bi * len + t;
            let rn = row * n..(row + 1) * n;
            let (b_t, c_t) = (&b[rn.clone()], &c[rn.clone()]);
            let h_t = &hs[t * en..(t + 1) * en];
            let prev_all: &[T] = if t > 0 { &hs[(t - 1) * en..t * en] } else { &zeros };
            let ab_t = &a_bars[t * en..(t + 1) * en];
            for ch in 0..e {
                let i = row * e + ch;
                let (dyt, ut, dt) = (dy[i], u[i], delta[i]);
                g.d[ch] += dyt * ut;
                let du = dt * ut;
                let r = ch * n..(ch + 1) * n;
                let (carry_c, a_c, ab_c) = (&mut carry[r.clone()], &a[r.clone()], &ab_t[r.clone()]);
                let (h_c, p_c) = (&h_t[r.clone()], &prev_all[r.clone()]);
                let ga = &mut g.a[r];
                let (gb, gc) = (&mut g.b[rn.clone()], &mut g.c[rn.clone()]);
                let (dd_terms, du_terms) = (&mut dd_terms[..n], &mut du_terms[..n]);
                assert!(carry_c.len() == n && a_c.len() == n && ab_c.len() == n && h_c.len() == n);
                assert!(p_c.len() == n && ga.len() == n && gb.len() == n && gc.len() == n);
                assert!(b_t.len() == n && c_t.len() == n);
                for s in 0..n {
                    let gh = carry_c[s] + c_t[s] * dyt;
                    gc[s] += dyt * h_c[s];
                    let d_ab = gh * p_c[s] * ab_c[s];
                    ga[s] += d_ab * dt;
                    gb[s] += gh * du;
                    dd_terms[s] = d_ab * a_c[s] + gh * ut * b_t[s];
                    du_terms[s] = gh * dt * b_t[s];
                    carry_c[s] = gh * ab_c[s];
                }
                let mut dd_acc = T::zero();
                let mut du_acc = T::zero();
                for s in 0..n {
                    dd_acc += dd_terms[s];
                    du_acc += du_terms[s];
                }
                g.u[i] = du_acc + d[ch] * dyt;
                g.delta[i] = dd_acc;
            }
        }
    }
    Ok(g)
}

fn run_scan<T: Real>(u: &Tensor<T>, p: &SelectiveParams<T>, chunk_len: Option<usize>) -> Result<Tensor<T>> {
    let inputs = make_selective_params(u, p)?;
    let a = p.a_matrix();
    let args = ScanArgs::from_tensors(u, &inputs, &a, &p.d)?;
    let y = match chunk_len {
        None => scan_sequential(&args)?,
        Some(cl) => scan_chunked(&args, cl)?,
    };
    Tensor::from_vec(u.shape(), y)
}

/// Full S6 pass with the reference kernel: selection projections, then scan.
pub fn selective_scan_sequential<T: Real>(u: &Tensor<T>, p: &SelectiveParams<T>) -> Result<Tensor<T>> {
    run_scan(u, p, None)
}

/// Full S6 pass with the blocked kernel.
pub fn selective_scan_chunked<T: Real>(u: &Tensor<T>, p: &SelectiveParams<T>, chunk_len: usize) -> Result<Tensor<T>> {
    if chunk_len == 0 {
        return Err(config_err("chunk_len must be at least 1"));
    }
    run_scan(u, p, Some(chunk_len))
}

/// Learnable S6 layer: selection projections plus the scan, recorded on a
/// [`Graph`].
#[derive(Clone, Debug)]
pub struct S6Layer {
    pub a_log: ParamId,
    pub d: ParamId,
    pub delta_down: Linear,
    /// Carries `delta_bias` as its bias.
    pub delta_up: Linear,
    pub bc: Linear,
    pub channels: usize,
    pub state_dim: usize,
}

/// Bounds of the log-uniform initial step size.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl S6Layer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let a_log = Tensor::from_fn(&[channels, state_dim], |i| T::lit(((i % state_dim) + 1) as f64).ln());
        let a_log = store.add(format!("{name}.a_log"), a_log);
        let d = store.add(format!("{name}.d"), Tensor::full(&[channels], T::one()));
        let delta_down = Linear::new(store, &format!("{name}.delta_down"), channels, rank, false, rng);
        let mut delta_up = Linear::new(store, &format!("{name}.delta_up"), rank, channels, false, rng);
        let (lo, hi) = (DELTA_INIT_RANGE.0.ln(), DELTA_INIT_RANGE.1.ln());
        let bias = Tensor::from_fn(&[channels], |_| T::lit(inverse_softplus(rng.random_range(lo..hi).exp())));
        delta_up.bias = Some(store.add(format!("{name}.delta_bias"), bias));
        let bc = Linear::new(store, &format!("{name}.bc"), channels, 2 * state_dim, true, rng);
        S6Layer { a_log, d, delta_down, delta_up, bc, channels, state_dim }
    }

    /// `[batch, L, E] → [batch, L, E]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let low = self.delta_down.forward(g, x)?;
        let pre = self.delta_up.forward(g, low)?;
        let delta = g.softplus(pre);
        let bc = self.bc.forward(g, x)?;
        let b = g.slice_last(bc, 0, self.state_dim)?;
        let c = g.slice_last(bc, self.state_dim, self.state_dim)?;
        let (a_log, d) = (g.param(self.a_log), g.param(self.d));
        g.selective_scan(x, delta, a_log, b, c, d)
    }

    /// Snapshot of the stored values as plain tensors.
    pub fn weights<T: Real>(&self, store: &ParamStore<T>) -> SelectiveParams<T> {
        SelectiveParams {
            a_log: store.get(self.a_log).clone(),
            d: store.get(self.d).clone(),
            delta_down: store.get(self.delta_down.weight).clone(),
            delta_up: store.get(self.delta_up.weight).clone(),
            delta_bias: store.get(self.delta_up.bias.expect("delta bias")).clone(),
            bc_weight: store.get(self.bc.weight).clone(),
            bc_bias: store.get(self.bc.bias.expect("bc bias")).clone(),
        }
    }

    /// Overwrites the stored values from plain tensors.
    pub fn set_weights<T: Real>(&self, store: &mut ParamStore<T>, p: &SelectiveParams<T>) -> Result<()> {
        store.set(self.a_log, p.a_log.clone())?;
        store.set(self.d, p.d.clone())?;
        store.set(self.delta_down.weight, p.delta_down.clone())?;
        store.set(self.delta_up.weight, p.delta_up.clone())?;
        store.set(self.delta_up.bias.expect("delta bias"), p.delta_bias.clone())?;
        store.set(self.bc.weight, p.bc_weight.clone())?;
        store.set(self.bc.bias.expect("bc bias"), p.bc_bias.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args_for<'a>(
        u: &'a [f64],
        delta: &'a [f64],
        a: &'a [f64],
        b: &'a [f64],
        c: &'a [f64],
        d: &'a [f64],
        len: usize,
        e: usize,
        n: usize,
    ) -> ScanArgs<'a, f64> {
        ScanArgs { u, delta, a, b, c, d, batch: 1, len, channels: e, state: n }
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(50.0f64), 50.0);
    }

    #[test]
    fn zero_input_gives_softplus_bias_and_zero_bc() {
        let p = SelectiveParams::<f64>::zeros(3, 4);
        let x = Tensor::zeros(&[2, 5, 3]);
        let out = make_selective_params(&x, &p).unwrap();
        assert!(out.delta.data().iter().all(|&d| (d - std::f64::consts::LN_2).abs() < 1e-4));
        assert!(out.b.data().iter().all(|&v| v == 0.0));
        assert!(out.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn make_params_rejects_bad_shapes_and_nan() {
        let p = SelectiveParams::<f64>::zeros(3, 4);
        assert!(matches!(make_selective_params(&Tensor::zeros(&[1, 2, 4]), &p), Err(Error::Config(_))));
        let mut x = Tensor::zeros(&[1, 2, 3]);
        x.data_mut()[4] = f64::NAN;
        assert!(matches!(make_selective_params(&x, &p), Err(Error::Numeric { index: 4, .. })));
    }

    #[test]
    fn discretize_closed_forms() {
        let b = Tensor::from_vec(&[1, 2], vec![0.3, -2.0]).unwrap();
        let (ab, bb) = discretize(&Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(), &Tensor::zeros(&[1, 2]), &b).unwrap();
        assert_eq!(ab.data(), &[1.0, 1.0]);
        assert_eq!(bb.data(), b.data());

        let a = Tensor::full(&[1, 1], -1.0);
        let (ab, _) = discretize(&Tensor::full(&[1], std::f64::consts::LN_2), &a, &Tensor::full(&[1], 1.0)).unwrap();
        assert!((ab.data()[0] - 0.5).abs() < 1e-15);

        let (ab, bb) = discretize(&Tensor::full(&[1], 1e-12), &a, &Tensor::full(&[1], 1.0)).unwrap();
        assert!((ab.data()[0] - 1.0).abs() < 1e-11 && bb.data()[0] < 1e-11);
    }

    #[test]
    fn discretize_rejects_non_positive_delta() {
        let r = discretize(
            &Tensor::from_vec(&[2], vec![0.1, 0.0]).unwrap(),
            &Tensor::full(&[2, 1], -1.0),
            &Tensor::full(&[1], 1.0),
        );
        assert!(matches!(r, Err(Error::Numeric { index: 1, .. })));
    }

    #[test]
    fn zero_a_unit_bc_is_prefix_sum() {
        let u: Vec<f64> = vec![1.0, -2.0, 0.5, 4.0, 3.0];
        let ones = vec![1.0; 5];
        let args = args_for(&u, &ones, &[0.0], &ones, &ones, &[0.0], 5, 1, 1);
        let y = scan_sequential(&args).unwrap();
        assert_eq!(y, vec![1.0, -1.0, -0.5, 3.5, 6.5]);
        assert_eq!(scan_chunked(&args, 2).unwrap(), y);
    }

    #[test]
    fn single_step_closed_form() {
        let (u, dt, a, b, c, d) = ([0.7], [0.3], [-1.2, -0.4], [0.5, 2.0], [1.5, -0.25], [0.9]);
        let args = args_for(&u, &dt, &a, &b, &c, &d, 1, 1, 2);
        let y = scan_sequential(&args).unwrap()[0];
        let bbar = [dt[0] * b[0], dt[0] * b[1]];
        let want = (c[0] * bbar[0] + c[1] * bbar[1]) * u[0] + d[0] * u[0];
        assert!((y - want).abs() < 1e-15);
    }

    #[test]
    fn chunk_len_zero_is_config_error() {
        let z = [0.0];
        let args = args_for(&z, &[1.0], &z, &z, &z, &z, 1, 1, 1);
        assert!(matches!(scan_chunked(&args, 0), Err(Error::Config(_))));
    }

    #[test]
    fn overflow_reports_step() {
        let u = [1e300, 1e300, 1e300];
        let ones = [1.0; 3];
        let args = args_for(&u, &[1e10; 3], &[0.0], &ones, &ones, &[0.0], 3, 1, 1);
        assert!(matches!(scan_sequential(&args), Err(Error::Numeric { index: 0, .. })));
    }
}
