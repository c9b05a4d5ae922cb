//! Parameterised layers built on [`Graph`] operations.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var, ZERO_ROW};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the truncated-normal initialiser for linear maps.
pub const INIT_STD: f64 = 0.02;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Affine map over the last axis; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(&[in_dim, out_dim], INIT_STD, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Depth-wise `k×k` convolution with optional dilation and "same" padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub ksize: usize,
    pub dilation: usize,
}

impl DepthwiseConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        ksize: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (ksize * ksize) as f64;
        DepthwiseConv {
            kernel: store.add(format!("{name}.kernel"), trunc_normal(&[ksize * ksize, channels], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            ksize,
            dilation,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        g.depthwise_conv(x, k, b, self.ksize, self.dilation)
    }
}

/// Full `3×3` convolution (zero padding 1) as an im2col gather plus a linear
/// map `9·C_in → C_out`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub linear: Linear,
}

impl Conv3x3 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv3x3 { linear: Linear::new(store, name, 9 * in_ch, out_ch, true, rng) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let cols = g.gather_rows(x, im2col_index(b, h, w), c, &[b, h, w, 9 * c])?;
        self.linear.forward(g, cols)
    }
}

/// Row index turning `[B,H,W,C]` into `[B,H,W,9·C]` 3×3 neighbourhoods.
pub fn im2col_index(b: usize, h: usize, w: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(b * h * w * 9);
    for bi in 0..b {
        for i in 0..h as isize {
            for j in 0..w as isize {
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let (si, sj) = (i + di, j + dj);
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            idx.push(ZERO_ROW);
                        } else {
                            idx.push((bi * h + si as usize) * w + sj as usize);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}
