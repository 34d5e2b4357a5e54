//! Target-task rollouts for the hierarchical controller and the two
//! non-hierarchical learners.

use rand::Rng;

use super::loss::{GoalStep, PrimitiveStep, TaskEpisode};
use crate::env::Environment;
use crate::error::Result;
use crate::policies::{BobPolicy, CharliePolicy, FlatPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharlieSchedule {
    /// Primitive steps Bob executes per goal.
    pub t_c: usize,
    /// Goals Charlie may issue per episode.
    pub budget: usize,
}

/// Charlie reads the full observation and emits a goal; Bob acts on his own
/// observation with that goal for `t_c` steps, or until the episode ends.
pub fn run_charlie_episode<E: Environment, R: Rng + ?Sized>(
    env: &E,
    charlie: &CharliePolicy,
    bob: &BobPolicy,
    schedule: CharlieSchedule,
    mut state: E::State,
    rng: &mut R,
) -> Result<TaskEpisode> {
    let mut goals = Vec::with_capacity(schedule.budget);
    let mut steps = Vec::with_capacity(schedule.budget * schedule.t_c);
    'outer: for _ in 0..schedule.budget {
        if env.is_done(&state) {
            break;
        }
        let obs = env.observe(&state);
        let (goal, log_prob, baseline) = charlie.act(&obs, rng)?;
        goals.push(GoalStep {
            obs,
            goal: goal.clone(),
            log_prob,
            baseline,
            first_step: steps.len(),
            ret: 0.0,
        });
        for _ in 0..schedule.t_c {
            let obs = env.observe_low(&state);
            let d = bob.act_with_goal(&obs, &goal, rng)?;
            let tr = env.step(&mut state, d.action.discrete().expect("bob acts discretely"))?;
            steps.push(PrimitiveStep {
                obs,
                goal: Some(goal.clone()),
                action: d.action,
                log_prob: d.log_prob,
                baseline: d.baseline,
                reward: tr.reward,
                ret: 0.0,
            });
            if tr.done {
                break 'outer;
            }
        }
    }
    let mut ep = TaskEpisode {
        goals,
        steps,
        total_reward: 0.0,
    };
    ep.assign_returns();
    Ok(ep)
}

/// Flat policy on the full observation until the episode ends.
pub fn run_flat_episode<E: Environment, R: Rng + ?Sized>(
    env: &E,
    policy: &FlatPolicy,
    mut state: E::State,
    rng: &mut R,
) -> Result<TaskEpisode> {
    let mut steps = Vec::new();
    while !env.is_done(&state) {
        let obs = env.observe(&state);
        let d = policy.act(&obs, rng)?;
        let tr = env.step(&mut state, d.action.discrete().expect("flat policy acts discretely"))?;
        steps.push(PrimitiveStep {
            obs,
            goal: None,
            action: d.action,
            log_prob: d.log_prob,
            baseline: d.baseline,
            reward: tr.reward,
            ret: 0.0,
        });
    }
    let mut ep = TaskEpisode {
        goals: vec![],
        steps,
        total_reward: 0.0,
    };
    ep.assign_returns();
    Ok(ep)
}

/// Bob alone with one fixed goal vector until the episode ends.
pub fn run_fixed_goal_episode<E: Environment, R: Rng + ?Sized>(
    env: &E,
    bob: &BobPolicy,
    goal: &[f64],
    mut state: E::State,
    rng: &mut R,
) -> Result<TaskEpisode> {
    let mut steps = Vec::new();
    while !env.is_done(&state) {
        let obs = env.observe_low(&state);
        let d = bob.act_with_goal(&obs, goal, rng)?;
        let tr = env.step(&mut state, d.action.discrete().expect("bob acts discretely"))?;
        steps.push(PrimitiveStep {
            obs,
            goal: Some(goal.to_vec()),
            action: d.action,
            log_prob: d.log_prob,
            baseline: d.baseline,
            reward: tr.reward,
            ret: 0.0,
        });
    }
    let mut ep = TaskEpisode {
        goals: vec![],
        steps,
        total_reward: 0.0,
    };
    ep.assign_returns();
    Ok(ep)
}
