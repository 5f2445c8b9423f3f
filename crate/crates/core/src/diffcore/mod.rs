//! Minimal reverse-mode differentiation kernel.
//!
//! Every value on the [`Tape`] is a row-major matrix whose rows index the
//! batch. Parameters live in a [`ParamStore`]; a tape borrows the store
//! immutably during the forward pass and [`Tape::backward`] returns the
//! gradients, which are then accumulated into the store.

mod adam;
mod checkpoint;
pub mod count;
mod gradcheck;
mod gumbel;
mod lstm;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use gumbel::{gumbel_noise, gumbel_softmax_st, GumbelMode, TAU_MIN};
pub use lstm::{lstm_cell, LstmParams};
pub use params::{ParamId, ParamStore, ParamTensor};
pub(crate) use tape::sigmoid;
pub use tape::{Gradients, Tape, Var};

pub type Matrix = ndarray::Array2<f64>;
