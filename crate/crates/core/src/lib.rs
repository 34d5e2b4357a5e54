//! Hierarchical reinforcement learning with asymmetric self-play.
//!
//! Two copies of an agent play an unsupervised game: Alice proposes a task by
//! acting in the environment, Bob is rewarded for reaching the state she ended
//! in. The goal encoder Bob learns along the way becomes the action space of a
//! high-level controller (Charlie) trained on the target task.

pub mod analysis;
pub mod config;
pub mod env;
pub mod error;
pub mod nn;
pub mod policies;
pub mod selfplay;
pub mod training;

pub use config::{Method, Phase, RunConfig};
pub use env::{EnvKind, Environment};
pub use error::{Error, Result};
