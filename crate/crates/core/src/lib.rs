//! Distributed and localized model predictive control.
//!
//! Closed-loop MPC policies are parameterized by finite-horizon system
//! responses `(Phi_x, Phi_u)` restricted to `d`-hop neighborhoods of the
//! subsystem interconnection graph, and computed by a consensus ADMM in which
//! every subsystem solves small row and column subproblems using only data
//! from its neighborhood.

pub mod constraints;
pub mod dlmpc;
pub mod error;
pub mod model;
pub mod netsim;
pub mod oracle;
pub mod qp;
pub mod sls;
pub mod textfmt;

pub use error::{Error, Result};
