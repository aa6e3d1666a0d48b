//! Network-slicing market engine.
//!
//! Service providers (SPs) lease resources from network providers (NPs) and
//! serve end users whose satisfaction follows a sigmoid in the resources they
//! receive. The crate provides:
//!
//! * [`utility`]: satisfaction curves, the revenue-optimal user price, concave
//!   envelopes and nonconcavity bounds;
//! * [`solver`]: the concavified SP demand program and its KKT check;
//! * [`sigprog`]: branch-and-bound for the exact (sigmoid) allocation problems;
//! * [`auction`]: the discrete clock auction, its Lyapunov trace and the
//!   ε-equilibrium certificate;
//! * [`market`]: the iterated market cycle with overbooking and feedback;
//! * [`inference`]: Metropolis learning of class parameters from feedback;
//! * [`scenario`]: the TOML scenario schema and bundled fixtures.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auction;
mod barrier;
pub mod error;
pub mod inference;
pub mod market;
pub mod scenario;
pub mod sigprog;
pub mod solver;
pub mod utility;

pub use error::{Error, Result};
