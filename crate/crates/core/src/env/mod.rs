//! Seedable environments. States are plain values: copying a state and
//! replaying the same actions reproduces the same trajectory.

use std::fmt::Debug;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod keydoor;
pub mod pointgather;

pub use keydoor::{KeyDoor, KeyDoorConfig, KeyDoorState};
pub use pointgather::{PointGather, PointGatherConfig, PointGatherState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
}

/// Summary of one self-play task, from the proposer's start to `s*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub key_picked: bool,
    pub door_opened: bool,
    /// Self-play distance `D(start, target)`.
    pub distance: f64,
    pub start_xy: [f64; 2],
    pub target_xy: [f64; 2],
}

pub trait Environment {
    type State: Clone + Debug + Serialize;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::State>;

    fn step(&self, state: &mut Self::State, action: &[usize]) -> Result<Transition>;

    fn is_done(&self, state: &Self::State) -> bool;

    /// Full observation, seen by the high-level controller and flat baselines.
    fn observe(&self, state: &Self::State) -> Vec<f64>;

    /// Observation seen by the self-play agents.
    fn observe_low(&self, state: &Self::State) -> Vec<f64>;

    fn obs_dim(&self) -> usize;

    fn low_obs_dim(&self) -> usize;

    /// Self-play success distance `D`.
    fn distance(&self, a: &Self::State, b: &Self::State) -> f64;

    /// Number of bins of each discrete action dimension.
    fn action_bins(&self) -> Vec<usize>;

    fn max_steps(&self) -> usize;

    fn task_info(&self, start: &Self::State, target: &Self::State) -> TaskInfo;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    KeyDoor,
    PointGather,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keydoor" => Ok(EnvKind::KeyDoor),
            "pointgather" => Ok(EnvKind::PointGather),
            other => Err(Error::Config(format!("unknown environment `{other}`"))),
        }
    }
}

/// Writes one JSON object per state (the `dump-episode` debug format).
pub fn dump_episode<S: Serialize, W: Write>(states: &[S], mut out: W) -> Result<()> {
    for (t, state) in states.iter().enumerate() {
        let line = serde_json::json!({ "t": t, "state": state });
        writeln!(out, "{line}").map_err(|e| Error::io("<episode dump>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dump_has_one_line_per_state() {
        let env = KeyDoor::new(KeyDoorConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = env.reset(&mut rng).unwrap();
        let mut states = vec![s.clone()];
        for a in [0, 1, 2] {
            env.step(&mut s, &[a]).unwrap();
            states.push(s.clone());
        }
        let mut buf = Vec::new();
        dump_episode(&states, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["t"], 0);
        assert_eq!(first["state"]["width"], 6);
    }

    #[test]
    fn env_kind_parses() {
        assert_eq!("keydoor".parse::<EnvKind>().unwrap(), EnvKind::KeyDoor);
        assert!("ant".parse::<EnvKind>().is_err());
    }
}
