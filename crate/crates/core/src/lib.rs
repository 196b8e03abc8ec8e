//! Delay-constrained utility maximization for multihop slotted-Aloha networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`network`] holds topologies, sessions, generators and the JSON network file.
//! * [`delay`] evaluates the M/G/1 link-delay model and per-slot success probabilities.
//! * [`solver`] contains the generic machinery: a log-barrier interior method,
//!   projected gradient descent, probability projections, step schedules and KKT checks.
//! * [`mac`] solves the link-delay constrained MAC problem (centralized, distributed
//!   dual decomposition, and the non-iterative suboptimal rule) and the MinDc feasibility
//!   threshold.
//! * [`crosslayer`] solves the joint congestion/contention problem with end-to-end
//!   delay budgets, centrally and with the gradient and Newton-like distributed schemes.
//! * [`sim`] is a slot-level simulator used to validate the analytical model.

pub mod crosslayer;
pub mod delay;
mod error;
pub mod mac;
pub mod network;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
pub use network::{Link, Network, Session, Topology};

/// Interior margin applied to probabilities and throughputs inside solvers.
pub const EPS: f64 = 1e-6;

/// Lower bound on any rate, keeping `log r` finite.
pub const RATE_FLOOR: f64 = 1e-9;
