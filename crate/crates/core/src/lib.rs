//! Average-reward reinforcement learning for continuing MDPs.

pub mod deep;
pub mod env;
pub mod error;
pub mod exec;
pub mod harness;
pub mod mdp;
pub mod neural;
pub mod record;
pub mod solvers;
pub mod tabular;

pub use error::{Error, Result};
