//! Insider optimal control of stochastic delay equations.
//!
//! Gaussian inside information enters through the conditional Donsker-delta
//! kernel; controls are simulated with an Euler scheme for delay equations,
//! adjoints solve linear time-advanced BSDEs by the backward method of steps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod delay_ode;
pub mod donsker;
pub mod error;
pub mod func;
pub mod harvest;
pub mod maxprinciple;
pub mod paths;
pub mod portfolio;
pub mod quadrature;
pub mod sdde;

pub use error::{LabError, Result};
pub use func::TimeFunction;
pub use paths::{BrownianPath, Channel, JumpModel, JumpPath, MCEstimate, SeedPolicy, TimeGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
