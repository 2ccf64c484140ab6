//! Bayesian-optimization search over reinforcement-learning training curricula.
//!
//! The pipeline: a [`curriculum::Curriculum`] schedules environment settings
//! over training epochs; [`ppo`] trains a small policy on the procedurally
//! generated racing environment in [`env`]; [`eval`] measures robustness on a
//! set of hard settings; [`search`] fits a Gaussian process ([`gp`]) to the
//! observed rewards and maximizes an upper-confidence-bound acquisition with
//! the box-constrained quasi-Newton optimizer in [`boxopt`].

pub mod boxopt;
pub mod curriculum;
pub mod digest;
pub mod env;
pub mod eval;
pub mod error;
pub mod gp;
pub mod pipeline;
pub mod ppo;
pub mod search;
pub mod seed;

pub use error::{Error, Result};
