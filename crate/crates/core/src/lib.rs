//! Safe reinforcement learning under hidden-parameter dynamics.
//!
//! The crate bundles five pieces that compose into one pipeline:
//!
//! * [`env`]: 2D point-mass tasks whose physics are scaled by per-episode
//!   hidden multipliers, with indicator costs.
//! * [`function_encoder`]: neural basis functions whose least-squares
//!   coefficients identify the current dynamics online.
//! * [`conformal`]: an adaptive conformal radius on next-state prediction error.
//! * [`shield`]: a sampling-based runtime action filter built on the two above.
//! * [`sro`]: a Lagrangian actor-critic with a bounded cost-sensitivity
//!   regularizer added to the advantage.
//!
//! [`harness`] wires them into pretraining, training and evaluation runs and
//! hosts the acceptance suites.

pub mod conformal;
pub mod env;
pub mod error;
pub mod function_encoder;
pub mod harness;
pub mod numerics;
pub mod seeds;
pub mod shield;
pub mod sro;

pub use error::{Error, Result};
