//! A laboratory for studying when a variational autoencoder with a discrete
//! sequence bottleneck learns a compositional language.
//!
//! The crate is organised bottom-up:
//!
//! - [`grammar`]: the fixed-length compositional language family.
//! - [`datasets`]: train/val/test splits with held-out concept pairs.
//! - [`diffcore`]: a small reverse-mode autodiff kernel (tape, LSTM cell,
//!   straight-through Gumbel-Softmax, Adam, gradient checking, checkpoints).
//! - [`model`]: speaker, listener, learned prior and the ELBO objective.
//! - [`metrics`]: precision, recall, accuracy and residual entropy.
//! - [`experiments`]: training loop, sweeps, records and reports.

pub mod datasets;
pub mod diffcore;
pub mod error;
pub mod experiments;
pub mod grammar;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
pub use grammar::{ConceptString, GrammarSpec};
