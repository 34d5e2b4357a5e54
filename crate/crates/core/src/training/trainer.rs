//! Update loops for self-play pre-training and the target task. Each trainer
//! owns its policies, one RMSProp state per parameter set and the run's RNG,
//! so a checkpoint plus [`RunConfig`] is enough to resume bit-identically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    alice_loss, batch_env_steps, bob_loss, charlie_loss, primitive_loss, LossParts, LossWeights, TaskEpisode,
};
use super::rollout::{run_charlie_episode, run_fixed_goal_episode, run_flat_episode, CharlieSchedule};
use crate::config::{Method, Phase, RunConfig};
use crate::env::{Environment, TaskInfo};
use crate::error::{Error, Result};
use crate::nn::{GradientBuffer, ParameterSet, RmsProp};
use crate::policies::{check_goal_dims, AlicePolicy, BobPolicy, CharliePolicy, FlatPolicy, GoalEncoder};
use crate::selfplay::{run_selfplay_episode, selfplay_stats, SelfPlayStats};

pub const TRAINER_FORMAT: &str = "hsp-trainer";
pub const TRAINER_VERSION: u32 = 1;

/// Metrics of one completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based index of the epoch just completed.
    pub epoch: usize,
    pub updates: usize,
    pub episodes: usize,
    /// Environment steps of this phase so far.
    pub env_steps: u64,
    /// Mean total external reward per episode (target task only).
    pub mean_reward: Option<f64>,
    /// Fraction of episodes with positive reward (target task only).
    pub success_rate: Option<f64>,
    /// Self-play statistics (pre-training only).
    pub selfplay: Option<SelfPlayStats>,
    /// Mean loss components per parameter set over the epoch's updates.
    pub losses: BTreeMap<String, LossParts>,
    /// Parameter sets whose step was rejected for a non-finite gradient,
    /// once per rejection.
    pub rejected_updates: Vec<String>,
    /// Alice's proposed tasks (pre-training only).
    pub tasks: Vec<TaskInfo>,
}

/// Clips and applies one gradient; a non-finite gradient leaves both the
/// parameters and the optimizer untouched and is recorded in `rejected`.
fn apply_update(
    name: &str,
    params: &mut ParameterSet,
    mut grads: GradientBuffer,
    opt: &mut RmsProp,
    clip: f64,
    rejected: &mut Vec<String>,
) -> Result<()> {
    if !grads.is_finite() {
        warn!("non-finite gradient for {name}; update rejected");
        rejected.push(name.to_string());
        return Ok(());
    }
    grads.clip_norm(clip);
    opt.step(params, &grads)
}

fn add_losses(acc: &mut BTreeMap<String, LossParts>, name: &str, parts: LossParts) {
    let e = acc.entry(name.to_string()).or_default();
    e.policy += parts.policy;
    e.baseline += parts.baseline;
    e.entropy += parts.entropy;
    e.imitation += parts.imitation;
}

fn mean_losses(acc: BTreeMap<String, LossParts>, updates: usize) -> BTreeMap<String, LossParts> {
    let k = 1.0 / updates.max(1) as f64;
    acc.into_iter()
        .map(|(name, p)| {
            (
                name,
                LossParts {
                    policy: p.policy * k,
                    baseline: p.baseline * k,
                    entropy: p.entropy * k,
                    imitation: p.imitation * k,
                },
            )
        })
        .collect()
}

/// Optimizer state, counters and RNG shared by both trainers' checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerFile {
    format: String,
    version: u32,
    phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<Method>,
    seed: u64,
    epoch: usize,
    env_steps: u64,
    rng: ChaCha8Rng,
    optimizers: BTreeMap<String, RmsProp>,
}

impl TrainerFile {
    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("trainer.json");
        let text = serde_json::to_string(self).map_err(|e| Error::format("trainer state", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn load(dir: &Path, phase: Phase) -> Result<Self> {
        let path = dir.join("trainer.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: TrainerFile =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("trainer state {}", path.display()), e))?;
        if file.format != TRAINER_FORMAT || file.version != TRAINER_VERSION {
            return Err(Error::format(
                "trainer state",
                format!(
                    "unsupported format {} v{} (expected {TRAINER_FORMAT} v{TRAINER_VERSION})",
                    file.format, file.version
                ),
            ));
        }
        if file.phase != phase {
            return Err(Error::format("trainer state", format!("checkpoint is from the {:?} phase", file.phase)));
        }
        Ok(file)
    }

    fn take_optimizer(&mut self, name: &str, params: &ParameterSet) -> Result<RmsProp> {
        let opt = self
            .optimizers
            .remove(name)
            .ok_or_else(|| Error::format("trainer state", format!("missing optimizer `{name}`")))?;
        if opt.mean_square().len() != params.flat().len() {
            return Err(Error::format("trainer state", format!("optimizer `{name}` does not match its parameters")));
        }
        Ok(opt)
    }
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::io(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Self-play pre-training of Alice, Bob and the goal encoder.
pub struct Pretrainer<E: Environment> {
    env: E,
    cfg: RunConfig,
    seed: u64,
    pub alice: AlicePolicy,
    pub bob: BobPolicy,
    pub encoder: GoalEncoder,
    alice_opt: RmsProp,
    bob_opt: RmsProp,
    encoder_opt: RmsProp,
    rng: ChaCha8Rng,
    epoch: usize,
    env_steps: u64,
}

impl<E: Environment> Pretrainer<E> {
    pub fn new(env: E, cfg: RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = env.low_obs_dim();
        let bins = env.action_bins();
        let alice = AlicePolicy::new(obs, bins.clone(), cfg.hidden, &mut rng)?;
        let bob = BobPolicy::new(obs, cfg.k, bins, cfg.hidden, &mut rng)?;
        let encoder = GoalEncoder::new(obs, cfg.k, cfg.hidden, cfg.encoder, &mut rng)?;
        let alice_opt = RmsProp::new(cfg.optimizer, &alice.net.params);
        let bob_opt = RmsProp::new(cfg.optimizer, &bob.net.params);
        let encoder_opt = RmsProp::new(cfg.optimizer, &encoder.params);
        Ok(Self {
            env,
            cfg,
            seed,
            alice,
            bob,
            encoder,
            alice_opt,
            bob_opt,
            encoder_opt,
            rng,
            epoch: 0,
            env_steps: 0,
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let mut stats = Vec::with_capacity(self.cfg.updates_per_epoch);
        let mut tasks = Vec::new();
        let mut losses = BTreeMap::new();
        let mut rejected = Vec::new();
        let alice_w = LossWeights {
            baseline: self.cfg.baseline_weight,
            entropy: self.cfg.beta,
            imitation: 0.0,
        };
        let bob_w = LossWeights {
            baseline: self.cfg.baseline_weight,
            entropy: 0.0,
            imitation: self.cfg.alpha,
        };
        for _ in 0..self.cfg.updates_per_epoch {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let start = self.env.reset(&mut self.rng)?;
                batch.push(run_selfplay_episode(
                    &self.env,
                    &self.alice,
                    &self.bob,
                    &self.encoder,
                    &self.cfg.selfplay,
                    start,
                    &mut self.rng,
                )?);
            }
            self.env_steps += batch.iter().map(|e| e.env_steps() as u64).sum::<u64>();
            stats.push(selfplay_stats(&batch));
            tasks.extend(batch.iter().flat_map(|e| e.games.iter().map(|g| g.task)));

            let lambda = self.cfg.selfplay.lambda;
            let a = alice_loss(&self.alice, &batch, lambda, &alice_w)?;
            let b = bob_loss(&self.bob, &self.encoder, &batch, lambda, &bob_w)?;
            add_losses(&mut losses, "alice", a.parts);
            add_losses(&mut losses, "bob", b.parts);
            let clip = self.cfg.grad_clip;
            apply_update("alice", &mut self.alice.net.params, a.grads, &mut self.alice_opt, clip, &mut rejected)?;
            apply_update("bob", &mut self.bob.net.params, b.bob_grads, &mut self.bob_opt, clip, &mut rejected)?;
            apply_update(
                "encoder",
                &mut self.encoder.params,
                b.encoder_grads,
                &mut self.encoder_opt,
                clip,
                &mut rejected,
            )?;
        }
        self.epoch += 1;
        let merged = SelfPlayStats::merge(&stats);
        Ok(EpochReport {
            epoch: self.epoch,
            updates: stats.len(),
            episodes: merged.episodes,
            env_steps: self.env_steps,
            mean_reward: None,
            success_rate: None,
            selfplay: Some(merged),
            losses: mean_losses(losses, stats.len()),
            rejected_updates: rejected,
            tasks,
        })
    }

    /// Writes the policies, the encoder, the trainer state and the config.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.alice.save(&dir.join("alice.json"))?;
        self.bob.save(&dir.join("bob.json"))?;
        self.encoder.save(&dir.join("encoder.json"))?;
        let optimizers = BTreeMap::from([
            ("alice".to_string(), self.alice_opt.clone()),
            ("bob".to_string(), self.bob_opt.clone()),
            ("encoder".to_string(), self.encoder_opt.clone()),
        ]);
        TrainerFile {
            format: TRAINER_FORMAT.into(),
            version: TRAINER_VERSION,
            phase: Phase::Pretrain,
            method: None,
            seed: self.seed,
            epoch: self.epoch,
            env_steps: self.env_steps,
            rng: self.rng.clone(),
            optimizers,
        }
        .save(dir)?;
        write_config(&self.cfg, dir)
    }

    /// Restores a trainer saved by [`Pretrainer::save`]. `cfg` may differ from
    /// the saved config only in run-length fields such as `epochs`.
    pub fn resume(env: E, cfg: RunConfig, dir: &Path) -> Result<Self> {
        let mut file = TrainerFile::load(dir, Phase::Pretrain)?;
        let alice = AlicePolicy::load(&dir.join("alice.json"))?;
        let bob = BobPolicy::load(&dir.join("bob.json"))?;
        let encoder = GoalEncoder::load(&dir.join("encoder.json"))?;
        check_selfplay_shapes(&env, &cfg, &alice, &bob, &encoder)?;
        let alice_opt = file.take_optimizer("alice", &alice.net.params)?;
        let bob_opt = file.take_optimizer("bob", &bob.net.params)?;
        let encoder_opt = file.take_optimizer("encoder", &encoder.params)?;
        Ok(Self {
            env,
            cfg,
            seed: file.seed,
            alice,
            bob,
            encoder,
            alice_opt,
            bob_opt,
            encoder_opt,
            rng: file.rng,
            epoch: file.epoch,
            env_steps: file.env_steps,
        })
    }
}

fn check_selfplay_shapes<E: Environment>(
    env: &E,
    cfg: &RunConfig,
    alice: &AlicePolicy,
    bob: &BobPolicy,
    encoder: &GoalEncoder,
) -> Result<()> {
    if alice.obs_dim() != env.low_obs_dim() || encoder.network().input_dim() != env.low_obs_dim() {
        return Err(Error::Config("checkpoint observation size does not match the environment".into()));
    }
    check_bob(env, cfg, bob, encoder)
}

/// Checks a pre-trained Bob and encoder against the environment and `cfg.k`.
fn check_bob<E: Environment>(env: &E, cfg: &RunConfig, bob: &BobPolicy, encoder: &GoalEncoder) -> Result<()> {
    if encoder.k() != cfg.k || bob.k() != cfg.k {
        return Err(Error::Config(format!(
            "field `k` is {} but the checkpoint's encoder has K = {}",
            cfg.k,
            encoder.k()
        )));
    }
    if bob.net.network().input_dim() != env.low_obs_dim() {
        return Err(Error::Config("checkpoint observation size does not match the environment".into()));
    }
    if bob.net.heads().action_dims() != env.action_bins().len() {
        return Err(Error::Config("checkpoint action heads do not match the environment".into()));
    }
    Ok(())
}

/// Bob and encoder from a pre-training checkpoint directory.
pub fn load_pretrained(dir: &Path) -> Result<(BobPolicy, GoalEncoder)> {
    Ok((
        BobPolicy::load(&dir.join("bob.json"))?,
        GoalEncoder::load(&dir.join("encoder.json"))?,
    ))
}

/// Target-task learner selected by [`Method`].
#[derive(Debug, Clone)]
pub enum Learner {
    Hsp {
        charlie: CharliePolicy,
        bob: BobPolicy,
        /// Kept for analysis exports; goals bypass it during this phase.
        encoder: Option<GoalEncoder>,
        charlie_opt: RmsProp,
        bob_opt: RmsProp,
    },
    Flat {
        policy: FlatPolicy,
        opt: RmsProp,
    },
    /// Bob with a fixed all-zero goal, fine-tuned directly.
    Bob {
        bob: BobPolicy,
        encoder: Option<GoalEncoder>,
        opt: RmsProp,
    },
}

impl Learner {
    fn method(&self) -> Method {
        match self {
            Learner::Hsp { .. } => Method::Hsp,
            Learner::Flat { .. } => Method::Reinforce,
            Learner::Bob { .. } => Method::Selfplay,
        }
    }
}

/// Training on the target task with the external reward.
pub struct TaskTrainer<E: Environment> {
    env: E,
    cfg: RunConfig,
    seed: u64,
    pub learner: Learner,
    rng: ChaCha8Rng,
    epoch: usize,
    env_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    /// Population standard deviation of the per-episode reward.
    pub std_reward: f64,
    pub success_rate: f64,
}

impl<E: Environment> TaskTrainer<E> {
    /// Builds the learner for `cfg.method`. `pretrained` supplies Bob and the
    /// encoder; without it Bob starts from random weights.
    pub fn new(env: E, cfg: RunConfig, seed: u64, pretrained: Option<(BobPolicy, GoalEncoder)>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some((bob, encoder)) = &pretrained {
            check_bob(&env, &cfg, bob, encoder)?;
        }
        let fresh_bob = |rng: &mut ChaCha8Rng| BobPolicy::new(env.low_obs_dim(), cfg.k, env.action_bins(), cfg.hidden, rng);
        let learner = match cfg.method {
            Method::Hsp => {
                let charlie = CharliePolicy::new(env.obs_dim(), cfg.k, cfg.hidden, &mut rng)?;
                let (bob, encoder) = match pretrained {
                    Some((bob, encoder)) => {
                        check_goal_dims(&charlie, &bob, &encoder)?;
                        (bob, Some(encoder))
                    }
                    None => (fresh_bob(&mut rng)?, None),
                };
                Learner::Hsp {
                    charlie_opt: RmsProp::new(cfg.optimizer, &charlie.net.params),
                    bob_opt: RmsProp::new(cfg.optimizer, &bob.net.params),
                    charlie,
                    bob,
                    encoder,
                }
            }
            Method::Reinforce => {
                let policy = FlatPolicy::new(env.obs_dim(), env.action_bins(), cfg.hidden, &mut rng)?;
                Learner::Flat {
                    opt: RmsProp::new(cfg.optimizer, &policy.net.params),
                    policy,
                }
            }
            Method::Selfplay => {
                let (bob, encoder) = match pretrained {
                    Some((bob, encoder)) => (bob, Some(encoder)),
                    None => (fresh_bob(&mut rng)?, None),
                };
                Learner::Bob {
                    opt: RmsProp::new(cfg.optimizer, &bob.net.params),
                    bob,
                    encoder,
                }
            }
        };
        Ok(Self {
            env,
            cfg,
            seed,
            learner,
            rng,
            epoch: 0,
            env_steps: 0,
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Target-task environment steps so far (pre-training excluded).
    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn budget_reached(&self) -> bool {
        self.cfg.max_env_steps.is_some_and(|max| self.env_steps >= max)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.budget_reached()
    }

    fn schedule(&self) -> CharlieSchedule {
        CharlieSchedule {
            t_c: self.cfg.t_c,
            budget: self.cfg.charlie_budget,
        }
    }

    /// One episode with the current parameters.
    pub fn rollout(&self, rng: &mut ChaCha8Rng) -> Result<TaskEpisode> {
        let start = self.env.reset(rng)?;
        match &self.learner {
            Learner::Hsp { charlie, bob, .. } => run_charlie_episode(&self.env, charlie, bob, self.schedule(), start, rng),
            Learner::Flat { policy, .. } => run_flat_episode(&self.env, policy, start, rng),
            Learner::Bob { bob, .. } => run_fixed_goal_episode(&self.env, bob, &vec![0.0; bob.k()], start, rng),
        }
    }

    /// Runs up to `updates_per_epoch` updates; stops early once the step
    /// budget is reached.
    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let weights = LossWeights {
            baseline: self.cfg.baseline_weight,
            entropy: 0.0,
            imitation: 0.0,
        };
        let clip = self.cfg.grad_clip;
        let mut losses = BTreeMap::new();
        let mut rejected = Vec::new();
        let mut updates = 0;
        let mut episodes = 0;
        let mut reward = 0.0;
        let mut successes = 0;
        while updates < self.cfg.updates_per_epoch && !self.budget_reached() {
            let mut rng = self.rng.clone();
            let batch = (0..self.cfg.batch_size)
                .map(|_| self.rollout(&mut rng))
                .collect::<Result<Vec<_>>>()?;
            self.rng = rng;
            self.env_steps += batch_env_steps(&batch) as u64;
            episodes += batch.len();
            reward += batch.iter().map(|e| e.total_reward).sum::<f64>();
            successes += batch.iter().filter(|e| e.total_reward > 0.0).count();
            match &mut self.learner {
                Learner::Hsp {
                    charlie,
                    bob,
                    charlie_opt,
                    bob_opt,
                    ..
                } => {
                    let c = charlie_loss(charlie, &batch, &weights)?;
                    let b = primitive_loss(&bob.net, &batch, &weights)?;
                    add_losses(&mut losses, "charlie", c.parts);
                    add_losses(&mut losses, "bob", b.parts);
                    apply_update("charlie", &mut charlie.net.params, c.grads, charlie_opt, clip, &mut rejected)?;
                    apply_update("bob", &mut bob.net.params, b.grads, bob_opt, clip, &mut rejected)?;
                }
                Learner::Flat { policy, opt } => {
                    let l = primitive_loss(&policy.net, &batch, &weights)?;
                    add_losses(&mut losses, "flat", l.parts);
                    apply_update("flat", &mut policy.net.params, l.grads, opt, clip, &mut rejected)?;
                }
                Learner::Bob { bob, opt, .. } => {
                    let l = primitive_loss(&bob.net, &batch, &weights)?;
                    add_losses(&mut losses, "bob", l.parts);
                    apply_update("bob", &mut bob.net.params, l.grads, opt, clip, &mut rejected)?;
                }
            }
            updates += 1;
        }
        self.epoch += 1;
        let frac = |x: f64| if episodes == 0 { 0.0 } else { x / episodes as f64 };
        Ok(EpochReport {
            epoch: self.epoch,
            updates,
            episodes,
            env_steps: self.env_steps,
            mean_reward: Some(frac(reward)),
            success_rate: Some(frac(successes as f64)),
            selfplay: None,
            losses: mean_losses(losses, updates),
            rejected_updates: rejected,
            tasks: vec![],
        })
    }

    /// Mean and spread of the episode reward over `episodes` fresh episodes,
    /// sampling actions from the frozen policies. The evaluation RNG is
    /// derived from `seed` and never touches the training RNG.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalSummary> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let rewards = (0..episodes)
            .map(|_| self.rollout(&mut rng).map(|e| e.total_reward))
            .collect::<Result<Vec<_>>>()?;
        let n = rewards.len().max(1) as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Ok(EvalSummary {
            episodes,
            mean_reward: mean,
            std_reward: var.sqrt(),
            success_rate: rewards.iter().filter(|&&r| r > 0.0).count() as f64 / n,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut optimizers = BTreeMap::new();
        match &self.learner {
            Learner::Hsp {
                charlie,
                bob,
                encoder,
                charlie_opt,
                bob_opt,
            } => {
                charlie.save(&dir.join("charlie.json"))?;
                bob.save(&dir.join("bob.json"))?;
                if let Some(enc) = encoder {
                    enc.save(&dir.join("encoder.json"))?;
                }
                optimizers.insert("charlie".to_string(), charlie_opt.clone());
                optimizers.insert("bob".to_string(), bob_opt.clone());
            }
            Learner::Flat { policy, opt } => {
                policy.save(&dir.join("flat.json"))?;
                optimizers.insert("flat".to_string(), opt.clone());
            }
            Learner::Bob { bob, encoder, opt } => {
                bob.save(&dir.join("bob.json"))?;
                if let Some(enc) = encoder {
                    enc.save(&dir.join("encoder.json"))?;
                }
                optimizers.insert("bob".to_string(), opt.clone());
            }
        }
        TrainerFile {
            format: TRAINER_FORMAT.into(),
            version: TRAINER_VERSION,
            phase: Phase::Train,
            method: Some(self.learner.method()),
            seed: self.seed,
            epoch: self.epoch,
            env_steps: self.env_steps,
            rng: self.rng.clone(),
            optimizers,
        }
        .save(dir)?;
        write_config(&self.cfg, dir)
    }

    /// Restores a trainer saved by [`TaskTrainer::save`].
    pub fn resume(env: E, cfg: RunConfig, dir: &Path) -> Result<Self> {
        let mut file = TrainerFile::load(dir, Phase::Train)?;
        if file.method != Some(cfg.method) {
            return Err(Error::Config(format!(
                "field `method` is `{}` but the checkpoint was trained with {:?}",
                cfg.method.as_str(),
                file.method
            )));
        }
        let encoder_path = dir.join("encoder.json");
        let encoder = if encoder_path.exists() {
            Some(GoalEncoder::load(&encoder_path)?)
        } else {
            None
        };
        let learner = match cfg.method {
            Method::Hsp => {
                let charlie = CharliePolicy::load(&dir.join("charlie.json"))?;
                let bob = BobPolicy::load(&dir.join("bob.json"))?;
                Learner::Hsp {
                    charlie_opt: file.take_optimizer("charlie", &charlie.net.params)?,
                    bob_opt: file.take_optimizer("bob", &bob.net.params)?,
                    charlie,
                    bob,
                    encoder,
                }
            }
            Method::Reinforce => {
                let policy = FlatPolicy::load(&dir.join("flat.json"))?;
                Learner::Flat {
                    opt: file.take_optimizer("flat", &policy.net.params)?,
                    policy,
                }
            }
            Method::Selfplay => {
                let bob = BobPolicy::load(&dir.join("bob.json"))?;
                Learner::Bob {
                    opt: file.take_optimizer("bob", &bob.net.params)?,
                    bob,
                    encoder,
                }
            }
        };
        Ok(Self {
            env,
            cfg,
            seed: file.seed,
            learner,
            rng: file.rng,
            epoch: file.epoch,
            env_steps: file.env_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvKind, KeyDoor, KeyDoorConfig};

    fn small_cfg(method: Method) -> RunConfig {
        let mut cfg = RunConfig::defaults_for(EnvKind::KeyDoor);
        cfg.hidden = 8;
        cfg.batch_size = 4;
        cfg.updates_per_epoch = 2;
        cfg.epochs = 3;
        cfg.method = method;
        cfg
    }

    fn env() -> KeyDoor {
        KeyDoor::new(KeyDoorConfig::default()).unwrap()
    }

    #[test]
    fn pretrain_epoch_counts() {
        let mut t = Pretrainer::new(env(), small_cfg(Method::Hsp), 3).unwrap();
        let r = t.run_epoch().unwrap();
        assert_eq!(r.epoch, 1);
        assert_eq!(r.updates, 2);
        assert_eq!(r.episodes, 8);
        let sp = r.selfplay.unwrap();
        assert_eq!(r.tasks.len(), sp.games);
        assert!(r.env_steps >= 8 * 5);
        assert!(r.losses.contains_key("alice") && r.losses.contains_key("bob"));
        assert!(r.rejected_updates.is_empty());
    }

    #[test]
    fn pretrain_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Pretrainer::new(env(), small_cfg(Method::Hsp), 5).unwrap();
        let mut b = Pretrainer::new(env(), small_cfg(Method::Hsp), 5).unwrap();
        a.run_epoch().unwrap();
        b.run_epoch().unwrap();
        b.save(dir.path()).unwrap();
        let mut b = Pretrainer::resume(env(), small_cfg(Method::Hsp), dir.path()).unwrap();
        assert_eq!(b.epoch(), 1);
        let ra = a.run_epoch().unwrap();
        let rb = b.run_epoch().unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.alice, b.alice);
        assert_eq!(a.bob, b.bob);
        assert_eq!(a.encoder, b.encoder);
    }

    #[test]
    fn task_resume_matches_uninterrupted_for_every_method() {
        for method in [Method::Hsp, Method::Reinforce, Method::Selfplay] {
            let dir = tempfile::tempdir().unwrap();
            let mut a = TaskTrainer::new(env(), small_cfg(method), 2, None).unwrap();
            let mut b = TaskTrainer::new(env(), small_cfg(method), 2, None).unwrap();
            a.run_epoch().unwrap();
            b.run_epoch().unwrap();
            b.save(dir.path()).unwrap();
            let mut b = TaskTrainer::resume(env(), small_cfg(method), dir.path()).unwrap();
            assert_eq!(a.run_epoch().unwrap(), b.run_epoch().unwrap(), "{method:?}");
            assert_eq!(a.evaluate(5, 9).unwrap(), b.evaluate(5, 9).unwrap());
        }
    }

    #[test]
    fn step_budget_stops_mid_epoch() {
        let mut cfg = small_cfg(Method::Reinforce);
        cfg.max_env_steps = Some(1);
        cfg.updates_per_epoch = 5;
        let mut t = TaskTrainer::new(env(), cfg, 0, None).unwrap();
        let r = t.run_epoch().unwrap();
        assert_eq!(r.updates, 1);
        assert!(t.finished());
    }

    #[test]
    fn pretrained_k_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bob = BobPolicy::new(180, 2, vec![6], 8, &mut rng).unwrap();
        let enc = GoalEncoder::new(180, 2, 8, crate::policies::EncoderMode::Absolute, &mut rng).unwrap();
        let err = TaskTrainer::new(env(), small_cfg(Method::Hsp), 0, Some((bob, enc))).err().unwrap();
        assert!(err.to_string().contains("`k`"), "{err}");
    }

    #[test]
    fn evaluation_leaves_training_untouched() {
        let mut a = TaskTrainer::new(env(), small_cfg(Method::Hsp), 4, None).unwrap();
        let mut b = TaskTrainer::new(env(), small_cfg(Method::Hsp), 4, None).unwrap();
        let e = a.evaluate(10, 4).unwrap();
        assert_eq!(e.episodes, 10);
        assert!(e.mean_reward >= 0.0 && e.mean_reward <= 1.0);
        assert_eq!(a.run_epoch().unwrap(), b.run_epoch().unwrap());
    }
}
