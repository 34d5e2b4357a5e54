//! REINFORCE with a learned baseline, and the per-phase losses built on it.
//!
//! Every loss is re-evaluated from recorded inputs and actions so the same
//! code path yields the scalar value (used by finite-difference checks) and
//! the gradients. Advantages `R - b` use the baseline recorded at rollout
//! time and are constants of the loss.

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::Result;
use crate::nn::{Action, GradientBuffer, PolicyOutput};
use crate::policies::{AlicePolicy, BobPolicy, CharliePolicy, EncoderMode, GoalEncoder, PolicyNet};
use crate::selfplay::{assign_rewards, SelfPlayEpisode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub log_prob: f64,
    pub baseline: f64,
    pub entropy: f64,
    pub ret: f64,
}

/// `sum_t [ -(R_t - b_t) log pi(a_t) + w_b (b_t - R_t)^2 ]`.
pub fn reinforce_loss(steps: &[TrajectoryStep], baseline_weight: f64) -> f64 {
    steps
        .iter()
        .map(|s| {
            let adv = s.ret - s.baseline;
            -adv * s.log_prob + baseline_weight * adv * adv
        })
        .sum()
}

/// `R_t = sum_{u >= t} r_u`.
pub fn suffix_returns(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc += r;
        out[t] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub baseline: f64,
    pub entropy: f64,
    pub imitation: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.policy + self.baseline + self.entropy + self.imitation
    }

    fn scale(&mut self, k: f64) {
        self.policy *= k;
        self.baseline *= k;
        self.entropy *= k;
        self.imitation *= k;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub baseline: f64,
    /// Entropy bonus (Alice).
    pub entropy: f64,
    /// Imitation weight (Bob).
    pub imitation: f64,
}

/// One REINFORCE term evaluated on a fresh forward pass: adds the loss into
/// `parts` and its gradient w.r.t. the raw network output into `d_raw`.
fn reinforce_term(
    out: &PolicyOutput,
    action: &Action,
    ret: f64,
    rollout_baseline: f64,
    weights: &LossWeights,
    parts: &mut LossParts,
    d_raw: &mut [f64],
) -> Result<()> {
    let adv = ret - rollout_baseline;
    let lp = out.log_prob(action)?;
    let b_err = out.baseline - ret;
    parts.policy += -adv * lp;
    parts.baseline += weights.baseline * b_err * b_err;
    out.add_log_prob_grad(action, -adv, d_raw)?;
    out.add_baseline_grad(2.0 * weights.baseline * b_err, d_raw);
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AliceLoss {
    pub parts: LossParts,
    pub grads: GradientBuffer,
}

/// Alice: REINFORCE on her discounted game returns minus `beta` times the
/// policy entropy, averaged over episodes.
pub fn alice_loss<S>(
    alice: &AlicePolicy,
    episodes: &[SelfPlayEpisode<S>],
    lambda: f64,
    weights: &LossWeights,
) -> Result<AliceLoss> {
    let mut grads = alice.net.zero_grads();
    let mut parts = LossParts::default();
    for ep in episodes {
        let returns = assign_rewards(ep, lambda);
        for (game, &ret) in ep.games.iter().zip(&returns.alice) {
            for step in &game.alice {
                let input = alice.input(&step.obs, &game.alice_start_obs)?;
                let (out, mut trace) = alice.net.forward(&input, None)?;
                let mut d_raw = vec![0.0; out.layout().output_dim()];
                reinforce_term(&out, &step.action, ret, step.baseline, weights, &mut parts, &mut d_raw)?;
                parts.entropy -= weights.entropy * out.entropy();
                out.add_entropy_grad(-weights.entropy, &mut d_raw);
                alice.net.backward(&mut trace, &d_raw, &mut grads)?;
            }
        }
    }
    let scale = 1.0 / episodes.len().max(1) as f64;
    parts.scale(scale);
    grads.scale(scale);
    Ok(AliceLoss { parts, grads })
}

#[derive(Debug, Clone)]
pub struct BobLoss {
    pub parts: LossParts,
    pub bob_grads: GradientBuffer,
    pub encoder_grads: GradientBuffer,
}

/// Evaluates `pi'_B(s, E(s*, s))` and backpropagates `d_raw` through Bob and
/// the `phi(s)` branch; the gradient for `phi(s*)` is returned to the caller,
/// which accumulates it over the game.
struct GoalPass<'a> {
    bob: &'a BobPolicy,
    encoder: &'a GoalEncoder,
    target_phi: &'a [f64],
}

impl GoalPass<'_> {
    fn run(
        &self,
        obs: &[f64],
        mut f: impl FnMut(&PolicyOutput, &mut [f64]) -> Result<()>,
        bob_grads: &mut GradientBuffer,
        encoder_grads: &mut GradientBuffer,
        d_target_phi: &mut [f64],
    ) -> Result<()> {
        let (goal, current_trace) = match self.encoder.mode() {
            EncoderMode::Absolute => (self.target_phi.to_vec(), None),
            EncoderMode::Difference => {
                let trace = self.encoder.embed_traced(obs)?;
                let goal = self
                    .target_phi
                    .iter()
                    .zip(trace.output())
                    .map(|(a, b)| a - b)
                    .collect();
                (goal, Some(trace))
            }
        };
        let (out, mut trace) = self.bob.net.forward(obs, Some(&goal))?;
        let mut d_raw = vec![0.0; out.layout().output_dim()];
        f(&out, &mut d_raw)?;
        let d_goal = self
            .bob
            .net
            .backward(&mut trace, &d_raw, bob_grads)?
            .expect("bob has a goal input");
        for (acc, g) in d_target_phi.iter_mut().zip(&d_goal) {
            *acc += g;
        }
        if let Some(mut current) = current_trace {
            let neg: Vec<f64> = d_goal.iter().map(|g| -g).collect();
            self.encoder.backward(&mut current, &neg, encoder_grads)?;
        }
        Ok(())
    }
}

/// Bob: REINFORCE on his discounted game returns plus `alpha` times the mean
/// negative log-likelihood of Alice's actions, averaged over episodes.
/// Gradients reach both Bob's policy and the encoder.
pub fn bob_loss<S>(
    bob: &BobPolicy,
    encoder: &GoalEncoder,
    episodes: &[SelfPlayEpisode<S>],
    lambda: f64,
    weights: &LossWeights,
) -> Result<BobLoss> {
    let mut bob_grads = bob.net.zero_grads();
    let mut encoder_grads = encoder.zero_grads();
    let mut parts = LossParts::default();
    for ep in episodes {
        let returns = assign_rewards(ep, lambda);
        let n_imitation: usize = ep.games.iter().map(|g| g.alice.len()).sum();
        let imitation_coef = if n_imitation > 0 {
            weights.imitation / n_imitation as f64
        } else {
            0.0
        };
        for (game, &ret) in ep.games.iter().zip(&returns.bob) {
            let mut target_trace = encoder.embed_traced(&game.target_obs)?;
            let target_phi = target_trace.output().to_vec();
            let mut d_target_phi = vec![0.0; target_phi.len()];
            let pass = GoalPass {
                bob,
                encoder,
                target_phi: &target_phi,
            };
            for step in &game.bob {
                pass.run(
                    &step.obs,
                    |out, d_raw| {
                        reinforce_term(out, &step.action, ret, step.baseline, weights, &mut parts, d_raw)
                    },
                    &mut bob_grads,
                    &mut encoder_grads,
                    &mut d_target_phi,
                )?;
            }
            if imitation_coef > 0.0 {
                for step in &game.alice {
                    pass.run(
                        &step.obs,
                        |out, d_raw| {
                            parts.imitation -= imitation_coef * out.log_prob(&step.action)?;
                            out.add_log_prob_grad(&step.action, -imitation_coef, d_raw)
                        },
                        &mut bob_grads,
                        &mut encoder_grads,
                        &mut d_target_phi,
                    )?;
                }
            }
            encoder.backward(&mut target_trace, &d_target_phi, &mut encoder_grads)?;
        }
    }
    let scale = 1.0 / episodes.len().max(1) as f64;
    parts.scale(scale);
    bob_grads.scale(scale);
    encoder_grads.scale(scale);
    Ok(BobLoss {
        parts,
        bob_grads,
        encoder_grads,
    })
}

/// One primitive decision on the target task.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveStep {
    pub obs: Vec<f64>,
    /// Goal fed to Bob (absent for the flat policy).
    pub goal: Option<Vec<f64>>,
    pub action: Action,
    pub log_prob: f64,
    pub baseline: f64,
    pub reward: f64,
    pub ret: f64,
}

/// One Charlie goal emission, covering up to `t_c` primitive steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalStep {
    pub obs: Vec<f64>,
    pub goal: Vec<f64>,
    pub log_prob: f64,
    pub baseline: f64,
    /// Index of the first primitive step executed under this goal.
    pub first_step: usize,
    pub ret: f64,
}

/// A target-task episode. `goals` is empty for non-hierarchical learners.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEpisode {
    pub goals: Vec<GoalStep>,
    pub steps: Vec<PrimitiveStep>,
    pub total_reward: f64,
}

impl TaskEpisode {
    /// Fills `ret` of every primitive step and goal with undiscounted
    /// reward-to-go.
    pub fn assign_returns(&mut self) {
        let rewards: Vec<f64> = self.steps.iter().map(|s| s.reward).collect();
        let returns = suffix_returns(&rewards);
        for (s, r) in self.steps.iter_mut().zip(&returns) {
            s.ret = *r;
        }
        for g in &mut self.goals {
            g.ret = returns.get(g.first_step).copied().unwrap_or(0.0);
        }
        self.total_reward = rewards.iter().sum();
    }

    pub fn env_steps(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone)]
pub struct NetLoss {
    pub parts: LossParts,
    pub grads: GradientBuffer,
}

/// REINFORCE over a network's primitive decisions (Bob with his recorded
/// goal, or the flat policy), averaged over episodes.
pub fn primitive_loss(net: &PolicyNet, episodes: &[TaskEpisode], weights: &LossWeights) -> Result<NetLoss> {
    let mut grads = net.zero_grads();
    let mut parts = LossParts::default();
    for ep in episodes {
        for step in &ep.steps {
            let (out, mut trace) = net.forward(&step.obs, step.goal.as_deref())?;
            let mut d_raw = vec![0.0; out.layout().output_dim()];
            reinforce_term(&out, &step.action, step.ret, step.baseline, weights, &mut parts, &mut d_raw)?;
            net.backward(&mut trace, &d_raw, &mut grads)?;
        }
    }
    let scale = 1.0 / episodes.len().max(1) as f64;
    parts.scale(scale);
    grads.scale(scale);
    Ok(NetLoss { parts, grads })
}

/// REINFORCE over Charlie's goal emissions, averaged over episodes.
pub fn charlie_loss(charlie: &CharliePolicy, episodes: &[TaskEpisode], weights: &LossWeights) -> Result<NetLoss> {
    let mut grads = charlie.net.zero_grads();
    let mut parts = LossParts::default();
    for ep in episodes {
        for g in &ep.goals {
            let (out, mut trace) = charlie.net.forward(&g.obs, None)?;
            let mut d_raw = vec![0.0; out.layout().output_dim()];
            let action = Action::Continuous(g.goal.clone());
            reinforce_term(&out, &action, g.ret, g.baseline, weights, &mut parts, &mut d_raw)?;
            charlie.net.backward(&mut trace, &d_raw, &mut grads)?;
        }
    }
    let scale = 1.0 / episodes.len().max(1) as f64;
    parts.scale(scale);
    grads.scale(scale);
    Ok(NetLoss { parts, grads })
}

/// Environment steps spent by a batch of target-task episodes.
pub fn batch_env_steps(episodes: &[TaskEpisode]) -> usize {
    episodes.iter().map(TaskEpisode::env_steps).sum()
}

/// Environment steps spent by a batch of self-play episodes.
pub fn selfplay_env_steps<E: Environment>(episodes: &[SelfPlayEpisode<E::State>]) -> usize {
    episodes.iter().map(SelfPlayEpisode::env_steps).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_baseline_gives_zero_loss() {
        let steps = [
            TrajectoryStep { log_prob: -0.3, baseline: 1.0, entropy: 0.0, ret: 1.0 },
            TrajectoryStep { log_prob: -2.0, baseline: 0.4, entropy: 0.0, ret: 0.4 },
        ];
        assert_eq!(reinforce_loss(&steps, 0.5), 0.0);
    }

    #[test]
    fn single_step_arithmetic() {
        let steps = [TrajectoryStep { log_prob: -1.0, baseline: 0.0, entropy: 0.0, ret: 1.0 }];
        assert_eq!(reinforce_loss(&steps, 0.5), 1.5);
    }

    proptest! {
        #[test]
        fn suffix_returns_match_brute_force(rewards in proptest::collection::vec(-2.0f64..2.0, 0..60)) {
            let got = suffix_returns(&rewards);
            for t in 0..rewards.len() {
                let want: f64 = rewards[t..].iter().sum();
                prop_assert!((got[t] - want).abs() < 1e-9);
            }
        }
    }
}
