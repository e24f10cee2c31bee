//! Pareto multi-objective policy optimization.
//!
//! The crate is `no_std` with `alloc`. It carries the pure algorithmic pieces:
//!
//! - [`simplex`]: the closed-form scalar min-norm solver and a Frank–Wolfe
//!   min-norm QP over gradient vectors (used as an oracle and stationarity checker).
//! - [`advantage`]: GAE, the Noon clamp and the ratio gates.
//! - [`autodiff`]: a small matrix-level reverse-mode tape and the token policy
//!   with `N` value heads.
//! - [`objectives`]: clipped surrogates, value losses, KL reward shaping and the
//!   three advantage aggregators (PAMA, MORLHF, MGDA-UB).
//! - [`envs`]: deterministic synthetic multi-objective sequence environments.
//! - [`trainers`]: the RL training loop and the smooth theory-check trainer.
//! - [`analysis`]: stationarity residuals, dominance and descent-lemma checks.
//!
//! IO, timing and the command line live in the `pama` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod advantage;
pub mod analysis;
pub mod autodiff;
pub mod envs;
mod error;
pub(crate) mod math;
pub mod objectives;
pub mod optim;
pub mod simplex;
pub mod trainers;

pub use error::{Error, Result};
