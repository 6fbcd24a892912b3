//! Chain-of-Experts (CoE) laboratory.
//!
//! A CoE layer runs `C` sequential routing passes inside one sparse FFN
//! sublayer. Each pass routes the evolving hidden state to `K / C` experts with
//! its own router and adds a residual, so the per-token expert budget stays `K`.
//! The crate carries everything needed to train and dissect such layers on a
//! single CPU:
//!
//! * [`autodiff`]: dense tensors with tape-based reverse-mode differentiation.
//! * [`experts`]: gated-linear-unit experts, routers and top-k gating (the MoE baseline).
//! * [`coe`]: the iterative layer with its residual and gating variants.
//! * [`model`]: a small decoder-only transformer built from CoE layers.
//! * [`train`]: data streams, AdamW, schedules, checkpoints and the training loop.
//! * [`analysis`]: co-activation matrices, exact routing combinatorics and cost models.

// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod coe;
mod error;
pub mod experts;
pub mod model;
pub mod rng;
pub mod train;

pub use autodiff::{DType, Element, ParamId, ParamStore, Parameter, Tape, Tensor, Var};
pub use coe::{CoEConfig, GatingMode, LayerTrace, ResidualMode, RoutingTrace};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use train::{DataConfig, DataStream, TrainConfig, TrainOutcome, TrainState};
