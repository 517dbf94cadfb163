//! Air-hockey simulator and a hierarchical puck-handling agent.

pub mod agent;
pub mod arm;
pub mod artifact;
pub mod dynamics;
pub mod ebm;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod mpc;
pub mod pipeline;
pub mod shot;
pub mod sim;
pub mod tactics;

pub use error::{Error, Result};
