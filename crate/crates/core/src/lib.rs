//! Randomized-subspace single-loop stochastic bilevel optimization.
//!
//! The crate implements a coupled single-loop recursion over an upper
//! variable `x`, a multilayer lower variable `Y`, an auxiliary variable `Z`
//! and a moving-average hypergradient `h`, where every lower-level derivative
//! is queried only inside a randomly sampled row subspace of each layer.
//! The self-layer Hessian actions lifted out of that subspace are biased; a
//! Rademacher bi-probe correction removes the bias with one extra projected
//! Hessian query per iteration.
//!
//! Layout:
//!
//! - [`blockmat`]: multilayer block variables and the Frobenius product space.
//! - [`randsrc`]: counter-keyed random streams, scaled Haar projectors, probes.
//! - [`moments`]: closed-form projector moment identities and Monte Carlo checks.
//! - [`problems`]: bilevel test problems with reference solutions and oracles.
//! - [`estimators`]: lifted, corrected and assembled stochastic directions.
//! - [`solvers`]: the corrected, full-space and naive single-loop recursions.
//! - [`memproxy`]: peak-memory proxy of one decoder block per method.
//!
//! The crate is `no_std` and only needs `alloc`; file formats and the command
//! line live in the `bros-cli` crate.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::result_large_err)]

extern crate alloc;

pub mod blockmat;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod memproxy;
pub mod moments;
pub mod problems;
pub mod randsrc;
pub mod solvers;

mod math;

pub use error::{Error, Result};
