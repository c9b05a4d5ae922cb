//! Visual state-space block: a gated two-stream block with SS2D in place of
//! attention and no MLP stage.
//!
//! ```text
//! (s1, s2) = split(in_proj(LN(x)))
//! y        = out_proj( LN_post(SS2D(SiLU(Conv(s1)))) ⊙ SiLU(s2) )
//! out      = x + y
//! ```

use rand_chacha::ChaCha8Rng;

use crate::config::ConvVariant;
use crate::error::{ensure_config, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv3x3, DepthwiseConv, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::ss2d::Ss2d;
use crate::tensor::{Real, Tensor};

/// Spatial mixing in front of SS2D.
#[derive(Clone, Debug)]
pub enum ConvUnit {
    Dw(DepthwiseConv),
    Conv2d(Conv3x3),
    DwDwd1x1 { dw: DepthwiseConv, dwd: DepthwiseConv, pointwise: Linear },
}

impl ConvUnit {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        variant: ConvVariant,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match variant {
            ConvVariant::Dw => ConvUnit::Dw(DepthwiseConv::new(store, name, channels, 3, 1, rng)),
            ConvVariant::Conv2d => ConvUnit::Conv2d(Conv3x3::new(store, name, channels, channels, rng)),
            ConvVariant::DwDwd1x1 => ConvUnit::DwDwd1x1 {
                dw: DepthwiseConv::new(store, &format!("{name}.dw"), channels, 5, 1, rng),
                dwd: DepthwiseConv::new(store, &format!("{name}.dwd"), channels, 7, 3, rng),
                pointwise: Linear::new(store, &format!("{name}.pw"), channels, channels, true, rng),
            },
        }
    }

    /// `[B, H, W, E] → [B, H, W, E]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            ConvUnit::Dw(c) => c.forward(g, x),
            ConvUnit::Conv2d(c) => c.forward(g, x),
            ConvUnit::DwDwd1x1 { dw, dwd, pointwise } => {
                let y = dw.forward(g, x)?;
                let y = dwd.forward(g, y)?;
                pointwise.forward(g, y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct VssBlock {
    pub in_norm: LayerNorm,
    pub in_proj: Linear,
    pub conv: ConvUnit,
    pub ss2d: Ss2d,
    pub post_norm: LayerNorm,
    pub out_proj: Linear,
    pub dim: usize,
    pub hidden: usize,
}

/// Intermediate values of one block, for inspection and tests.
pub struct VssTrace {
    pub normed: Var,
    pub stream1: Var,
    pub stream2: Var,
    pub conv: Var,
    pub activated: Var,
    pub scanned: Var,
    pub gated: Var,
    pub branch: Var,
    pub out: Var,
}

impl VssBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        state_dim: usize,
        rank: usize,
        conv: ConvVariant,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        VssBlock {
            in_norm: LayerNorm::new(store, &format!("{name}.in_norm"), dim),
            in_proj: Linear::new(store, &format!("{name}.in_proj"), dim, 2 * hidden, true, rng),
            conv: ConvUnit::new(store, &format!("{name}.conv"), hidden, conv, rng),
            ss2d: Ss2d::new(store, &format!("{name}.ss2d"), hidden, state_dim, rank, rng),
            post_norm: LayerNorm::new(store, &format!("{name}.post_norm"), hidden),
            out_proj: Linear::new(store, &format!("{name}.out_proj"), hidden, dim, true, rng),
            dim,
            hidden,
        }
    }

    /// `[B, L, C] → [B, L, C]` with `L = H·W`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, grid: (usize, usize)) -> Result<Var> {
        Ok(self.trace(g, x, grid)?.out)
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, grid: (usize, usize)) -> Result<VssTrace> {
        let s = g.shape(x).to_vec();
        let (h, w) = grid;
        ensure_config!(s.len() == 3 && s[2] == self.dim, "VSS input must be [B, L, {}], got {s:?}", self.dim);
        ensure_config!(s[1] == h * w, "token count {} != grid {h}x{w}", s[1]);
        let b = s[0];
        let e = self.hidden;
        let normed = self.in_norm.forward(g, x)?;
        let proj = self.in_proj.forward(g, normed)?;
        let stream1 = g.slice_last(proj, 0, e)?;
        let stream2 = g.slice_last(proj, e, e)?;
        let img = g.reshape(stream1, &[b, h, w, e])?;
        let conv = self.conv.forward(g, img)?;
        let activated = g.silu(conv);
        let scanned = self.ss2d.forward(g, activated)?;
        let flat = g.reshape(scanned, &[b, h * w, e])?;
        let normed_scan = self.post_norm.forward(g, flat)?;
        let gate = g.silu(stream2);
        let gated = g.mul(normed_scan, gate)?;
        let branch = self.out_proj.forward(g, gated)?;
        let out = g.add(x, branch)?;
        Ok(VssTrace { normed, stream1, stream2, conv, activated, scanned, gated, branch, out })
    }
}

/// Sequential composition of VSS blocks. On inference graphs the
/// intermediates of each block are released once its output is known.
pub fn vss_stack<T: Real>(g: &mut Graph<'_, T>, blocks: &[VssBlock], x: Var, grid: (usize, usize)) -> Result<Var> {
    ensure_config!(!blocks.is_empty(), "VSS stack depth must be at least 1");
    let mut h = x;
    for block in blocks {
        let mark = g.len();
        h = block.forward(g, h, grid)?;
        h = g.collapse(mark, h);
    }
    Ok(h)
}

/// Runs one block on plain tensors.
pub fn vss_forward<T: Real>(
    store: &ParamStore<T>,
    block: &VssBlock,
    tokens: &Tensor<T>,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let mut g = Graph::inference(store);
    let x = g.constant(tokens.clone());
    let y = block.forward(&mut g, x, grid)?;
    Ok(g.value(y).clone())
}
