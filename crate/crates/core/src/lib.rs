//! Planar-pushing workbench for CoM-conditioned manipulation policies.
//!
//! The crate covers the whole loop: polygon mass properties ([`geom`]), a
//! deterministic pushing simulator ([`sim`]), an episodic environment with
//! parameter conditioning ([`env`]), a small f64 learning stack with PPO and
//! Gaussian heads ([`learn`]), ensemble adaptation with inverse-variance
//! fusion against a prior ([`adapt`]), and the training/evaluation
//! orchestration behind the `pushfuse` command ([`eval`]).

pub mod adapt;
pub mod agent;
pub mod env;
pub mod error;
pub mod eval;
pub mod geom;
pub mod learn;
pub mod math;
pub mod record;
pub mod sim;

pub use error::{Error, Result};
