//! Losses, rollouts and training loops for both phases.

pub mod loss;
pub mod rollout;
pub mod runner;
pub mod trainer;
