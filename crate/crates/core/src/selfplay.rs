//! Asymmetric self-play episodes: Alice sets a task by acting for a fixed
//! number of steps, the environment rewinds, and Bob tries to reach Alice's
//! final state. Successful games chain into the next one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, TaskInfo};
use crate::error::{Error, Result};
use crate::nn::Action;
use crate::policies::{AlicePolicy, BobPolicy, GoalEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfPlayConfig {
    /// Alice's fixed number of steps per game.
    pub t_a: usize,
    /// Bob's step cap per game.
    pub t_b: usize,
    pub n_games_max: usize,
    /// Reward discount between games.
    pub lambda: f64,
    /// Success tolerance on the self-play distance.
    pub epsilon: f64,
}

impl SelfPlayConfig {
    pub fn keydoor() -> Self {
        Self {
            t_a: 5,
            t_b: 7,
            n_games_max: 4,
            lambda: 0.7,
            epsilon: 0.0,
        }
    }

    pub fn pointgather() -> Self {
        Self {
            t_a: 50,
            t_b: 70,
            n_games_max: 4,
            lambda: 0.7,
            epsilon: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_a == 0 {
            return Err(Error::Config("selfplay.t_a must be at least 1".into()));
        }
        if self.t_b <= self.t_a {
            return Err(Error::Config(format!(
                "selfplay.t_b ({}) must exceed selfplay.t_a ({})",
                self.t_b, self.t_a
            )));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config(format!("selfplay.lambda {} not in (0, 1]", self.lambda)));
        }
        if self.n_games_max == 0 {
            return Err(Error::Config("selfplay.n_games_max must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("selfplay.epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AliceStep {
    pub obs: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
    pub entropy: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BobStep {
    pub obs: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone)]
pub struct GameRecord<S> {
    pub index: usize,
    pub alice_start: S,
    pub alice_start_obs: Vec<f64>,
    pub alice: Vec<AliceStep>,
    /// Alice's final state `s*`.
    pub target: S,
    pub target_obs: Vec<f64>,
    pub bob_start: S,
    pub bob: Vec<BobStep>,
    pub bob_final: S,
    pub success: bool,
    pub task: TaskInfo,
}

impl<S> GameRecord<S> {
    pub fn bob_steps(&self) -> usize {
        self.bob.len()
    }

    pub fn bob_reward(&self) -> f64 {
        if self.success {
            1.0
        } else {
            0.0
        }
    }

    pub fn alice_reward(&self) -> f64 {
        1.0 - self.bob_reward()
    }
}

#[derive(Debug, Clone)]
pub struct SelfPlayEpisode<S> {
    pub start: S,
    pub games: Vec<GameRecord<S>>,
    /// The environment reached a terminal state while Alice was acting; the
    /// unfinished game was dropped.
    pub ended_by_environment: bool,
}

impl<S> SelfPlayEpisode<S> {
    pub fn env_steps(&self) -> usize {
        self.games.iter().map(|g| g.alice.len() + g.bob.len()).sum()
    }
}

/// Plays one multi-game episode from `start`.
pub fn run_selfplay_episode<E: Environment, R: Rng + ?Sized>(
    env: &E,
    alice: &AlicePolicy,
    bob: &BobPolicy,
    encoder: &GoalEncoder,
    cfg: &SelfPlayConfig,
    start: E::State,
    rng: &mut R,
) -> Result<SelfPlayEpisode<E::State>> {
    let mut games = Vec::new();
    let mut alice_state = start.clone();
    let mut bob_state = start.clone();
    let mut ended_by_environment = false;

    for index in 0..cfg.n_games_max {
        if env.is_done(&alice_state) || env.is_done(&bob_state) {
            ended_by_environment = true;
            break;
        }
        let alice_start = alice_state.clone();
        let alice_start_obs = env.observe_low(&alice_start);
        let mut alice_steps = Vec::with_capacity(cfg.t_a);
        let mut terminal = false;
        for _ in 0..cfg.t_a {
            let obs = env.observe_low(&alice_state);
            let d = alice.act(&obs, &alice_start_obs, rng)?;
            let action = d.action.discrete().expect("alice acts discretely").to_vec();
            let tr = env.step(&mut alice_state, &action)?;
            alice_steps.push(AliceStep {
                obs,
                action: d.action,
                log_prob: d.log_prob,
                entropy: d.entropy,
                baseline: d.baseline,
            });
            if tr.done {
                terminal = true;
                break;
            }
        }
        if terminal {
            ended_by_environment = true;
            break;
        }

        let target = alice_state.clone();
        let target_obs = env.observe_low(&target);
        let target_phi = encoder.embed(&target_obs)?;
        let bob_start = bob_state.clone();
        let mut bob_steps = Vec::with_capacity(cfg.t_b);
        let mut success = false;
        for _ in 0..cfg.t_b {
            let obs = env.observe_low(&bob_state);
            let goal = encoder.encode_with(&target_phi, &obs)?;
            let d = bob.act_with_goal(&obs, &goal, rng)?;
            let action = d.action.discrete().expect("bob acts discretely").to_vec();
            let tr = env.step(&mut bob_state, &action)?;
            bob_steps.push(BobStep {
                obs,
                action: d.action,
                log_prob: d.log_prob,
                baseline: d.baseline,
            });
            if env.distance(&bob_state, &target) <= cfg.epsilon {
                success = true;
                break;
            }
            if tr.done {
                break;
            }
        }

        let task = env.task_info(&alice_start, &target);
        games.push(GameRecord {
            index,
            alice_start,
            alice_start_obs,
            alice: alice_steps,
            target: target.clone(),
            target_obs,
            bob_start,
            bob: bob_steps,
            bob_final: bob_state.clone(),
            success,
            task,
        });
        if !success {
            break;
        }
        alice_state = target;
    }

    Ok(SelfPlayEpisode {
        start,
        games,
        ended_by_environment,
    })
}

/// Per-game returns for both players.
#[derive(Debug, Clone, PartialEq)]
pub struct GameReturns {
    pub bob: Vec<f64>,
    pub alice: Vec<f64>,
}

/// Discounted returns: game `k` receives `sum_{j>=k} lambda^(j-k) R(j)`, shared
/// by every step inside the game.
pub fn assign_rewards<S>(episode: &SelfPlayEpisode<S>, lambda: f64) -> GameReturns {
    let bob_rewards: Vec<f64> = episode.games.iter().map(GameRecord::bob_reward).collect();
    let alice_rewards: Vec<f64> = episode.games.iter().map(GameRecord::alice_reward).collect();
    GameReturns {
        bob: discounted_returns(&bob_rewards, lambda),
        alice: discounted_returns(&alice_rewards, lambda),
    }
}

pub fn discounted_returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (k, r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        out[k] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ImitationEntry<'a> {
    pub state: &'a [f64],
    pub target: &'a [f64],
    pub action: &'a Action,
}

/// Alice's `(state, s*, action)` triples, each paired with its own game's `s*`.
pub fn imitation_batch<S>(episode: &SelfPlayEpisode<S>) -> Vec<ImitationEntry<'_>> {
    episode
        .games
        .iter()
        .flat_map(|game| {
            game.alice.iter().map(move |step| ImitationEntry {
                state: &step.obs,
                target: &game.target_obs,
                action: &step.action,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayStats {
    pub episodes: usize,
    pub games: usize,
    pub mean_games: f64,
    /// Fraction of games Bob won.
    pub bob_success_rate: f64,
    /// Fraction of episodes in which Alice picked up the key.
    pub key_prob: f64,
    /// Fraction of episodes in which Alice unlocked the door.
    pub door_prob: f64,
    /// Mean `D(game start, s*)` over games.
    pub mean_task_distance: f64,
}

impl SelfPlayStats {
    /// Combines statistics of disjoint episode sets.
    pub fn merge(parts: &[SelfPlayStats]) -> SelfPlayStats {
        let episodes: usize = parts.iter().map(|p| p.episodes).sum();
        let games: usize = parts.iter().map(|p| p.games).sum();
        let by = |total: usize, weight: fn(&SelfPlayStats) -> usize, value: fn(&SelfPlayStats) -> f64| {
            if total == 0 {
                0.0
            } else {
                parts.iter().map(|p| weight(p) as f64 * value(p)).sum::<f64>() / total as f64
            }
        };
        SelfPlayStats {
            episodes,
            games,
            mean_games: if episodes == 0 {
                0.0
            } else {
                games as f64 / episodes as f64
            },
            bob_success_rate: by(games, |p| p.games, |p| p.bob_success_rate),
            key_prob: by(episodes, |p| p.episodes, |p| p.key_prob),
            door_prob: by(episodes, |p| p.episodes, |p| p.door_prob),
            mean_task_distance: by(games, |p| p.games, |p| p.mean_task_distance),
        }
    }
}

pub fn selfplay_stats<S>(episodes: &[SelfPlayEpisode<S>]) -> SelfPlayStats {
    let n = episodes.len();
    let games: Vec<&GameRecord<S>> = episodes.iter().flat_map(|e| &e.games).collect();
    if n == 0 {
        return SelfPlayStats::default();
    }
    let frac = |count: usize, total: usize| {
        if total == 0 {
            0.0
        } else {
            count as f64 / total as f64
        }
    };
    let key = episodes
        .iter()
        .filter(|e| e.games.iter().any(|g| g.task.key_picked))
        .count();
    let door = episodes
        .iter()
        .filter(|e| e.games.iter().any(|g| g.task.door_opened))
        .count();
    let wins = games.iter().filter(|g| g.success).count();
    let distance: f64 = games.iter().map(|g| g.task.distance).sum();
    SelfPlayStats {
        episodes: n,
        games: games.len(),
        mean_games: frac(games.len(), n),
        bob_success_rate: frac(wins, games.len()),
        key_prob: frac(key, n),
        door_prob: frac(door, n),
        mean_task_distance: if games.is_empty() {
            0.0
        } else {
            distance / games.len() as f64
        },
    }
}
