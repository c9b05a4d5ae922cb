//! The recurrent cell: a linear projection of `[X_t ; H_{t-1}]`, a stack of
//! VSS blocks, and a single-gate LSTM-style state update.
//!
//! ```text
//! G   = VSB(LP([X_t ; H_{t-1}]))
//! F_t = σ(G)
//! C_t = F_t ⊙ (tanh(G) + C_{t-1})
//! H_t = F_t ⊙ tanh(C_t)
//! ```

use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_config, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::vss_block::{vss_stack, VssBlock};

use crate::config::ConvVariant;
use crate::selective_scan::sigmoid;

/// Hidden and cell state of one cell, `[B, L, C]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        CellState { hidden: Tensor::zeros(shape), cell: Tensor::zeros(shape) }
    }
}

/// Cell state recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

impl StateVars {
    pub fn constant<T: Real>(g: &mut Graph<'_, T>, s: &CellState<T>) -> Self {
        StateVars { hidden: g.constant(s.hidden.clone()), cell: g.constant(s.cell.clone()) }
    }

    pub fn variable<T: Real>(g: &mut Graph<'_, T>, s: &CellState<T>) -> Self {
        StateVars { hidden: g.variable(s.hidden.clone()), cell: g.variable(s.cell.clone()) }
    }

    pub fn value<T: Real>(&self, g: &Graph<'_, T>) -> CellState<T> {
        CellState { hidden: g.value(self.hidden).clone(), cell: g.value(self.cell).clone() }
    }
}

#[derive(Clone, Debug)]
pub struct VmrnnCell {
    pub lp: Linear,
    pub blocks: Vec<VssBlock>,
    pub dim: usize,
}

impl VmrnnCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        depth: usize,
        expand: usize,
        state_dim: usize,
        rank: usize,
        conv: ConvVariant,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let lp = Linear::new(store, &format!("{name}.lp"), 2 * dim, dim, true, rng);
        let blocks = (0..depth)
            .map(|i| VssBlock::new(store, &format!("{name}.vsb{i}"), dim, expand * dim, state_dim, rank, conv, rng))
            .collect();
        VmrnnCell { lp, blocks, dim }
    }

    /// One recurrent step. A missing `prev` means zero hidden and cell state.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        prev: Option<StateVars>,
        grid: (usize, usize),
    ) -> Result<(Var, StateVars)> {
        let xs = g.shape(x).to_vec();
        ensure_config!(xs.len() == 3 && xs[2] == self.dim, "cell input must be [B, L, {}], got {xs:?}", self.dim);
        let prev = match prev {
            Some(p) => {
                ensure_config!(
                    g.shape(p.hidden) == xs.as_slice() && g.shape(p.cell) == xs.as_slice(),
                    "state shape {:?} does not match input {xs:?}",
                    g.shape(p.hidden)
                );
                p
            }
            None => {
                let z = CellState::zeros(&xs);
                StateVars::constant(g, &z)
            }
        };
        let joined = g.concat_last(x, prev.hidden)?;
        let projected = self.lp.forward(g, joined)?;
        let gates = vss_stack(g, &self.blocks, projected, grid)?;
        let forget = g.sigmoid(gates);
        let candidate = g.tanh(gates);
        let carried = g.add(candidate, prev.cell)?;
        let cell = g.mul(forget, carried)?;
        let squashed = g.tanh(cell);
        let hidden = g.mul(forget, squashed)?;
        Ok((hidden, StateVars { hidden, cell }))
    }

    /// Step on plain tensors.
    pub fn step_values<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        prev: Option<&CellState<T>>,
        grid: (usize, usize),
    ) -> Result<CellState<T>> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let pv = prev.map(|p| StateVars::constant(&mut g, p));
        let (_, next) = self.step(&mut g, xv, pv, grid)?;
        Ok(next.value(&g))
    }
}

/// Parameter-free LSTM step with all gates tied to `σ(X + H_{t-1})`:
///
/// ```text
/// i = f = o = σ(X + H_{t-1})
/// C_t = f ⊙ C_{t-1} + i ⊙ tanh(X + H_{t-1})
/// H_t = o ⊙ tanh(C_t)
/// ```
pub fn simplified_convlstm_step<T: Real>(
    x: &Tensor<T>,
    prev: Option<&CellState<T>>,
) -> Result<(Tensor<T>, CellState<T>)> {
    let zero;
    let prev = match prev {
        Some(p) => {
            x.check_same_shape(&p.hidden)?;
            x.check_same_shape(&p.cell)?;
            p
        }
        None => {
            zero = CellState::zeros(x.shape());
            &zero
        }
    };
    let mut hidden = Vec::with_capacity(x.len());
    let mut cell = Vec::with_capacity(x.len());
    for ((&xv, &hv), &cv) in x.data().iter().zip(prev.hidden.data()).zip(prev.cell.data()) {
        let s = xv + hv;
        let gate = sigmoid(s);
        let c = gate * cv + gate * s.tanh();
        cell.push(c);
        hidden.push(gate * c.tanh());
    }
    let hidden = Tensor::from_vec(x.shape(), hidden)?;
    let state = CellState { hidden: hidden.clone(), cell: Tensor::from_vec(x.shape(), cell)? };
    Ok((hidden, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convlstm_zero_input_stays_zero() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2]);
        let (h, s) = simplified_convlstm_step(&x, None).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(s.cell.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_saturates_for_large_input() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 40.0);
        let (h, s) = simplified_convlstm_step(&x, None).unwrap();
        assert!((s.cell.data()[0] - 40f64.tanh()).abs() < 1e-12);
        assert!((h.data()[0] - 40f64.tanh().tanh()).abs() < 1e-12);
    }

    #[test]
    fn convlstm_shape_mismatch_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2]);
        let bad = CellState::zeros(&[1, 4, 3]);
        assert!(simplified_convlstm_step(&x, Some(&bad)).is_err());
    }
}
