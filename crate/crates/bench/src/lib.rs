//! Deterministic inputs for the benchmarks.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vmrnn::params::uniform;
use vmrnn::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Operands of a raw scan: `u`, `Δ`, `A`, `B`, `C`, `D` for one sequence.
pub struct ScanInputs {
    pub u: Tensor<f32>,
    pub delta: Tensor<f32>,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub c: Tensor<f32>,
    pub d: Tensor<f32>,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanInputs {
    pub fn random(len: usize, channels: usize, state: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        ScanInputs {
            u: uniform(&[1, len, channels], -1.0, 1.0, &mut r),
            delta: uniform(&[1, len, channels], 0.001, 0.1, &mut r),
            a: uniform(&[channels, state], -16.0, -1.0, &mut r),
            b: uniform(&[1, len, state], -1.0, 1.0, &mut r),
            c: uniform(&[1, len, state], -1.0, 1.0, &mut r),
            d: uniform(&[channels], 0.5, 1.5, &mut r),
            len,
            channels,
            state,
        }
    }

    pub fn args(&self) -> vmrnn::selective_scan::ScanArgs<'_, f32> {
        vmrnn::selective_scan::ScanArgs {
            u: self.u.data(),
            delta: self.delta.data(),
            a: self.a.data(),
            b: self.b.data(),
            c: self.c.data(),
            d: self.d.data(),
            batch: 1,
            len: self.len,
            channels: self.channels,
            state: self.state,
        }
    }
}

pub fn tokens(shape: &[usize], seed: u64) -> Tensor<f32> {
    uniform(shape, -1.0, 1.0, &mut rng(seed))
}
