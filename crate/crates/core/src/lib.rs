//! Adaptive gradient correction for dynamic sparse and adversarial training.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`rng`]: deterministic dense arithmetic and seeded streams.
//! * [`nn`]: MLPs with exact gradients, datasets and minibatches.
//! * [`sparsity`]: masks, sparsity initialisation and SET / RigL prune–grow rules.
//! * [`optim`]: the adaptive correction optimizer (AGENT) and the SGD, SVRG,
//!   Adam and MVR baselines, all mask-aware.
//! * [`adversarial`]: PGD attacks and the AT / TRADES objectives.
//! * [`diagnostics`]: gradient variance and correlation probes.
//! * [`harness`]: configuration, the epoch-structured training loop,
//!   checkpoints, metrics and run comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sparsity;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::{Batch, Dataset, ModelSpec, ParamSet};
pub use rng::RngStream;
pub use tensor::Tensor;
