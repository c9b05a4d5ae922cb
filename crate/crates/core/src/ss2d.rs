//! Two-dimensional selective scan: four directional traversals of a token
//! grid, one S6 pass per direction, and a merge back onto the grid.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_config, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::selective_scan::{selective_scan_chunked, S6Layer, SelectiveParams};
use crate::tensor::{Real, Tensor};

/// Chunk length used by the value-level [`ss2d_forward`].
const CHUNK: usize = 64;

/// Grid traversal order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Top-left to bottom-right, row by row.
    RowForward = 1,
    /// Bottom-right to top-left, reverse of `RowForward`.
    RowReverse = 2,
    /// Top-left to bottom-right, column by column.
    ColForward = 3,
    /// Reverse of `ColForward`.
    ColReverse = 4,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] =
        [ScanDirection::RowForward, ScanDirection::RowReverse, ScanDirection::ColForward, ScanDirection::ColReverse];

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1..=4 => Ok(Self::ALL[id as usize - 1]),
            _ => Err(Error::Config(format!("scan direction must be 1..=4, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// `perm[k]` is the row-major grid index visited at sequence position `k`.
    pub fn permutation(self, height: usize, width: usize) -> Vec<usize> {
        let len = height * width;
        let col_major = |k: usize| (k % height) * width + k / height;
        match self {
            ScanDirection::RowForward => (0..len).collect(),
            ScanDirection::RowReverse => (0..len).rev().collect(),
            ScanDirection::ColForward => (0..len).map(col_major).collect(),
            ScanDirection::ColReverse => (0..len).rev().map(col_major).collect(),
        }
    }
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

/// Row index applying `perm` independently to each of `batch` sequences.
fn batched(perm: &[usize], batch: usize) -> Rc<[usize]> {
    let len = perm.len();
    (0..batch).flat_map(|b| perm.iter().map(move |&p| b * len + p)).collect()
}

fn grid_dims<T: Real>(z: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    ensure_config!(z.rank() == 4, "token grid must be [B, H, W, C], got {:?}", z.shape());
    let s = z.shape();
    ensure_config!(s[1] >= 1 && s[2] >= 1, "grid must be at least 1x1");
    Ok((s[0], s[1], s[2], s[3]))
}

/// Unfolds `[B, H, W, C]` into `[B, H·W, C]` in the traversal order of `dir`.
pub fn scan_expand<T: Real>(z: &Tensor<T>, dir: ScanDirection) -> Result<Tensor<T>> {
    let (b, h, w, c) = grid_dims(z)?;
    let perm = dir.permutation(h, w);
    let mut out = Vec::with_capacity(z.len());
    for bi in 0..b {
        for &p in &perm {
            let off = (bi * h * w + p) * c;
            out.extend_from_slice(&z.data()[off..off + c]);
        }
    }
    Tensor::from_vec(&[b, h * w, c], out)
}

/// Scatters each directional sequence back to grid order and sums them.
/// `seqs[v]` must follow direction `ScanDirection::ALL[v]`.
pub fn scan_merge<T: Real>(seqs: &[Tensor<T>; 4], height: usize, width: usize) -> Result<Tensor<T>> {
    let s0 = seqs[0].shape().to_vec();
    ensure_config!(s0.len() == 3, "directional sequence must be [B, L, C], got {s0:?}");
    ensure_config!(s0[1] == height * width, "sequence length {} != {height}x{width}", s0[1]);
    for s in &seqs[1..] {
        ensure_config!(s.shape() == s0.as_slice(), "directional sequences differ in shape");
    }
    let (b, len, c) = (s0[0], s0[1], s0[2]);
    let mut out = Tensor::zeros(&[b, height, width, c]);
    for (seq, dir) in seqs.iter().zip(ScanDirection::ALL) {
        let perm = dir.permutation(height, width);
        for bi in 0..b {
            for (k, &p) in perm.iter().enumerate() {
                let src = (bi * len + k) * c;
                let dst = (bi * len + p) * c;
                for ch in 0..c {
                    out.data_mut()[dst + ch] += seq.data()[src + ch];
                }
            }
        }
    }
    Ok(out)
}

/// Value-level SS2D: expand, one S6 pass per direction, merge.
pub fn ss2d_forward<T: Real>(z: &Tensor<T>, params: &[SelectiveParams<T>; 4]) -> Result<Tensor<T>> {
    let (_, h, w, _) = grid_dims(z)?;
    let mut outs = Vec::with_capacity(4);
    for (dir, p) in ScanDirection::ALL.into_iter().zip(params) {
        let seq = scan_expand(z, dir)?;
        outs.push(selective_scan_chunked(&seq, p, CHUNK)?);
    }
    let outs: [Tensor<T>; 4] = outs.try_into().expect("four directions");
    scan_merge(&outs, h, w)
}

/// Learnable SS2D with independent S6 parameters per direction.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub dirs: [S6Layer; 4],
}

impl Ss2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dirs = std::array::from_fn(|v| {
            S6Layer::new(store, &format!("{name}.dir{}", v + 1), channels, state_dim, rank, rng)
        });
        Ss2d { dirs }
    }

    /// `[B, H, W, E] → [B, H, W, E]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        ensure_config!(s.len() == 4, "SS2D input must be [B, H, W, E], got {s:?}");
        let (b, h, w, e) = (s[0], s[1], s[2], s[3]);
        let mut merged = Vec::with_capacity(4);
        for (dir, layer) in ScanDirection::ALL.into_iter().zip(&self.dirs) {
            let perm = dir.permutation(h, w);
            let seq = g.gather_rows(z, batched(&perm, b), e, &[b, h * w, e])?;
            let out = layer.forward(g, seq)?;
            merged.push(g.gather_rows(out, batched(&invert(&perm), b), e, &[b, h, w, e])?);
        }
        g.sum(&merged)
    }

    pub fn weights<T: Real>(&self, store: &ParamStore<T>) -> [SelectiveParams<T>; 4] {
        std::array::from_fn(|v| self.dirs[v].weights(store))
    }
}
