//! Scalar-loop reference implementations shared by the integration tests.
//! Nothing here calls into the library's kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmrnn::metrics::{SSIM_SIGMA, SSIM_WINDOW};
use vmrnn::nn::{LayerNorm, Linear};
use vmrnn::params::ParamStore;
use vmrnn::selective_scan::SelectiveParams;
use vmrnn::vss_block::{ConvUnit, VssBlock};
use vmrnn::{Tensor, VmrnnCell};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Overwrites every parameter with uniform noise in `[-scale, scale]`, plus
/// one for layer-norm gains.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with(".gamma");
        for v in store.get_mut(id).data_mut() {
            *v = r.random_range(-scale..scale) + if gain { 1.0 } else { 0.0 };
        }
    }
}

pub fn random_selective(e: usize, n: usize, r: usize, rng: &mut ChaCha8Rng) -> SelectiveParams<f64> {
    SelectiveParams {
        a_log: uniform(&[e, n], -1.0, 1.0, rng),
        d: uniform(&[e], -1.0, 1.0, rng),
        delta_down: uniform(&[e, r], -0.5, 0.5, rng),
        delta_up: uniform(&[r, e], -0.5, 0.5, rng),
        delta_bias: uniform(&[e], -2.0, 0.0, rng),
        bc_weight: uniform(&[e, 2 * n], -0.5, 0.5, rng),
        bc_bias: uniform(&[2 * n], -0.2, 0.2, rng),
    }
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Rows of a `[rows, cols]` buffer.
pub fn rows(v: &[f64], cols: usize) -> Vec<Vec<f64>> {
    v.chunks(cols).map(|c| c.to_vec()).collect()
}

/// `x·W + b` with `W` stored `[in, out]`.
pub fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..din {
                        s += row[i] * w.data()[i * dout + o];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    affine(x, store.get(l.weight), l.bias.map(|b| store.get(b)))
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (g, b) = (store.get(ln.gamma).data(), store.get(ln.beta).data());
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) * r * g[j] + b[j]).collect()
        })
        .collect()
}

/// Triple-loop S6 on one sequence `u[t][e]`, using the discretised
/// `Ā = exp(Δ·A)` and `B̄ = Δ·B`.
pub fn scan_oracle(
    u: &[Vec<f64>],
    delta: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    d: &[f64],
) -> Vec<Vec<f64>> {
    let (len, e, n) = (u.len(), d.len(), a[0].len());
    let mut h = vec![vec![0.0; n]; e];
    let mut y = vec![vec![0.0; e]; len];
    for t in 0..len {
        for ch in 0..e {
            let mut acc = 0.0;
            for s in 0..n {
                let a_bar = (delta[t][ch] * a[ch][s]).exp();
                let b_bar = delta[t][ch] * b[t][s];
                h[ch][s] = a_bar * h[ch][s] + b_bar * u[t][ch];
                acc += c[t][s] * h[ch][s];
            }
            y[t][ch] = acc + d[ch] * u[t][ch];
        }
    }
    y
}

/// Δ, B and C for one sequence from scalar loops.
pub fn selection_oracle(u: &[Vec<f64>], p: &SelectiveParams<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = p.state_dim();
    let low = affine(u, &p.delta_down, None);
    let delta: Vec<Vec<f64>> = affine(&low, &p.delta_up, Some(&p.delta_bias))
        .into_iter()
        .map(|r| r.into_iter().map(softplus).collect())
        .collect();
    let bc = affine(u, &p.bc_weight, Some(&p.bc_bias));
    let b = bc.iter().map(|r| r[..n].to_vec()).collect();
    let c = bc.iter().map(|r| r[n..].to_vec()).collect();
    (delta, b, c)
}

/// Full S6 on one sequence.
pub fn s6_oracle(u: &[Vec<f64>], p: &SelectiveParams<f64>) -> Vec<Vec<f64>> {
    let (delta, b, c) = selection_oracle(u, p);
    let a: Vec<Vec<f64>> =
        rows(p.a_log.data(), p.state_dim()).into_iter().map(|r| r.into_iter().map(|v| -v.exp()).collect()).collect();
    scan_oracle(u, &delta, &a, &b, &c, p.d.data())
}

/// Grid positions `(i, j)` visited by direction `v ∈ 1..=4` on an `h×w`
/// grid: row-major, reversed row-major, column-major, reversed column-major.
pub fn traversal(v: u8, h: usize, w: usize) -> Vec<(usize, usize)> {
    let row: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    let col: Vec<(usize, usize)> = (0..w).flat_map(|j| (0..h).map(move |i| (i, j))).collect();
    match v {
        1 => row,
        2 => row.into_iter().rev().collect(),
        3 => col,
        4 => col.into_iter().rev().collect(),
        _ => panic!("direction {v}"),
    }
}

/// SS2D on one `[h·w][e]` grid in row-major token order.
pub fn ss2d_oracle(grid: &[Vec<f64>], h: usize, w: usize, params: &[SelectiveParams<f64>; 4]) -> Vec<Vec<f64>> {
    let e = grid[0].len();
    let mut out = vec![vec![0.0; e]; h * w];
    for v in 1..=4u8 {
        let order = traversal(v, h, w);
        let seq: Vec<Vec<f64>> = order.iter().map(|&(i, j)| grid[i * w + j].clone()).collect();
        let y = s6_oracle(&seq, &params[v as usize - 1]);
        for (k, &(i, j)) in order.iter().enumerate() {
            for ch in 0..e {
                out[i * w + j][ch] += y[k][ch];
            }
        }
    }
    out
}

/// Depth-wise convolution with zero padding, kernel `[k·k, C]`.
pub fn dw_conv(
    x: &[Vec<f64>],
    h: usize,
    w: usize,
    kernel: &Tensor<f64>,
    bias: &Tensor<f64>,
    k: usize,
    dil: usize,
) -> Vec<Vec<f64>> {
    let c = x[0].len();
    let r = (k / 2) as isize;
    let mut out = vec![bias.data().to_vec(); h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for ki in 0..k as isize {
                for kj in 0..k as isize {
                    let (si, sj) = (i + (ki - r) * dil as isize, j + (kj - r) * dil as isize);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        out[(i * w as isize + j) as usize][ch] += kernel.data()
                            [(ki * k as isize + kj) as usize * c + ch]
                            * x[(si * w as isize + sj) as usize][ch];
                    }
                }
            }
        }
    }
    out
}

/// Full 3×3 convolution with zero padding; weight `[9·C_in, C_out]` ordered
/// by neighbour `(di, dj)` then input channel.
pub fn conv3x3(x: &[Vec<f64>], h: usize, w: usize, l: &Linear, store: &ParamStore<f64>) -> Vec<Vec<f64>> {
    let c = x[0].len();
    let mut cols = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut row = Vec::with_capacity(9 * c);
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (si, sj) = (i + di, j + dj);
                    if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                        row.extend(std::iter::repeat_n(0.0, c));
                    } else {
                        row.extend_from_slice(&x[(si * w as isize + sj) as usize]);
                    }
                }
            }
            cols.push(row);
        }
    }
    linear(store, l, &cols)
}

/// One VSS block on a single `[h·w][C]` token grid.
pub fn vss_oracle(store: &ParamStore<f64>, blk: &VssBlock, x: &[Vec<f64>], h: usize, w: usize) -> Vec<Vec<f64>> {
    let e = blk.hidden;
    let normed = layer_norm(store, &blk.in_norm, x);
    let proj = linear(store, &blk.in_proj, &normed);
    let s1: Vec<Vec<f64>> = proj.iter().map(|r| r[..e].to_vec()).collect();
    let s2: Vec<Vec<f64>> = proj.iter().map(|r| r[e..].to_vec()).collect();
    let conv = match &blk.conv {
        ConvUnit::Dw(c) => dw_conv(&s1, h, w, store.get(c.kernel), store.get(c.bias), c.ksize, c.dilation),
        ConvUnit::Conv2d(c) => conv3x3(&s1, h, w, &c.linear, store),
        ConvUnit::DwDwd1x1 { dw, dwd, pointwise } => {
            let a = dw_conv(&s1, h, w, store.get(dw.kernel), store.get(dw.bias), dw.ksize, dw.dilation);
            let b = dw_conv(&a, h, w, store.get(dwd.kernel), store.get(dwd.bias), dwd.ksize, dwd.dilation);
            linear(store, pointwise, &b)
        }
    };
    let act: Vec<Vec<f64>> = conv.iter().map(|r| r.iter().map(|&v| silu(v)).collect()).collect();
    let params = blk.ss2d.weights(store);
    let scanned = ss2d_oracle(&act, h, w, &params);
    let post = layer_norm(store, &blk.post_norm, &scanned);
    let gated: Vec<Vec<f64>> =
        post.iter().zip(&s2).map(|(p, g)| p.iter().zip(g).map(|(a, b)| a * silu(*b)).collect()).collect();
    let branch = linear(store, &blk.out_proj, &gated);
    x.iter().zip(&branch).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

/// Splits a `[B, L, C]` tensor into per-batch `[L][C]` grids.
pub fn split_batch(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let (l, c) = (t.shape()[1], t.shape()[2]);
    t.data().chunks(l * c).map(|b| rows(b, c)).collect()
}

pub fn flatten(x: &[Vec<Vec<f64>>]) -> Vec<f64> {
    x.iter().flatten().flatten().copied().collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(H_t, C_t)` per token from the scalar update applied to the gate
/// pre-activation `G`.
pub fn eq_update(gates: &[Vec<f64>], c_prev: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut hs = Vec::new();
    let mut cs = Vec::new();
    for (g_row, c_row) in gates.iter().zip(c_prev) {
        let mut h = Vec::new();
        let mut c = Vec::new();
        for (&g, &cp) in g_row.iter().zip(c_row) {
            let f = sigmoid(g);
            let ct = f * (g.tanh() + cp);
            c.push(ct);
            h.push(f * ct.tanh());
        }
        hs.push(h);
        cs.push(c);
    }
    (hs, cs)
}

/// Full scalar cell step on one `[L][C]` grid.
pub fn cell_oracle(
    store: &ParamStore<f64>,
    cell: &VmrnnCell,
    x: &[Vec<f64>],
    prev: (&[Vec<f64>], &[Vec<f64>]),
    grid: (usize, usize),
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let joined: Vec<Vec<f64>> = x.iter().zip(prev.0).map(|(a, b)| [a.as_slice(), b].concat()).collect();
    let mut g = linear(store, &cell.lp, &joined);
    for blk in &cell.blocks {
        g = vss_oracle(store, blk, &g, grid.0, grid.1);
    }
    eq_update(&g, prev.1)
}

/// Direct 2D sliding-window SSIM on one plane.
pub fn ssim_window_oracle(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let k = SSIM_WINDOW;
    let sigma = SSIM_SIGMA;
    let mut taps = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    let c = (k as f64 - 1.0) / 2.0;
    for a in 0..k {
        for b in 0..k {
            let d2 = (a as f64 - c).powi(2) + (b as f64 - c).powi(2);
            taps[a][b] = (-d2 / (2.0 * sigma * sigma)).exp();
            total += taps[a][b];
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let wt = taps[a][b] / total;
                    let (p, q) = (x[(i + a) * w + j + b], y[(i + a) * w + j + b]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}
