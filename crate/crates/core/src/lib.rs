//! Recurrent selective state-space models for spatiotemporal forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`selective_scan`] – the S6 recurrence and its kernels,
//! * [`ss2d`] – four-direction 2D scan built on it,
//! * [`vss_block`] – the gated visual state-space block,
//! * [`cell`] – the recurrent cell and a tied-gate LSTM reference step,
//! * [`model`] – patch embedding, B/D topologies and rollouts,
//! * [`metrics`], [`data`], [`train`] – evaluation, datasets and training.
//!
//! Gradients come from the small reverse-mode tape in [`graph`].

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod presets;
pub mod selective_scan;
pub mod ss2d;
pub mod tensor;
pub mod train;
pub mod vss_block;

pub use cell::{simplified_convlstm_step, CellState, VmrnnCell};
pub use config::{ConvVariant, ModelConfig, RolloutPlan, Variant};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::Vmrnn;
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Real, Tensor};
