//! Planar point mass collecting green objects (+1) and avoiding red ones (-1).
//!
//! Dynamics: `v <- clamp(damping * v + a, v_max)`, `p <- clamp(p + v, arena)`.
//! Each action dimension picks one of five acceleration bins.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, TaskInfo, Transition};
use crate::error::{check_len, Error, Result};

pub const ACCEL_BINS: [f64; 5] = [-0.1, -0.05, 0.0, 0.05, 0.1];
pub const N_SECTORS: usize = 10;
pub const SENSOR_DIM: usize = 2 * N_SECTORS;
pub const LOW_OBS_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointGatherConfig {
    pub half_width: f64,
    pub n_green: usize,
    pub n_red: usize,
    pub max_steps: usize,
    pub v_max: f64,
    pub damping: f64,
    pub touch_radius: f64,
    pub sensor_range: f64,
    pub min_separation: f64,
    pub min_origin_distance: f64,
}

impl Default for PointGatherConfig {
    fn default() -> Self {
        Self {
            half_width: 8.0,
            n_green: 8,
            n_red: 8,
            max_steps: 1000,
            v_max: 0.5,
            damping: 0.95,
            touch_radius: 0.5,
            sensor_range: 6.0,
            min_separation: 1.0,
            min_origin_distance: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Green,
    Red,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub pos: [f64; 2],
    pub color: Color,
    pub alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGatherState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub objects: Vec<Object>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointGather {
    config: PointGatherConfig,
}

const PLACEMENT_ATTEMPTS: usize = 1000;

impl PointGather {
    pub fn new(config: PointGatherConfig) -> Result<Self> {
        if !(config.half_width > 0.0 && config.v_max > 0.0 && config.max_steps > 0) {
            return Err(Error::Config(
                "pointgather needs positive half_width, v_max and max_steps".into(),
            ));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &PointGatherConfig {
        &self.config
    }

    /// Sensor readings: green sectors then red sectors, `1/(1+d)` for the
    /// nearest alive object of that colour within range, else 0.
    pub fn sensors(&self, state: &PointGatherState) -> [f64; SENSOR_DIM] {
        let mut out = [0.0; SENSOR_DIM];
        for obj in state.objects.iter().filter(|o| o.alive) {
            let dx = obj.pos[0] - state.pos[0];
            let dy = obj.pos[1] - state.pos[1];
            let d = (dx * dx + dy * dy).sqrt();
            if d > self.config.sensor_range {
                continue;
            }
            let angle = dy.atan2(dx) + PI;
            let sector = ((angle / (2.0 * PI) * N_SECTORS as f64) as usize).min(N_SECTORS - 1);
            let slot = match obj.color {
                Color::Green => sector,
                Color::Red => N_SECTORS + sector,
            };
            out[slot] = f64::max(out[slot], 1.0 / (1.0 + d));
        }
        out
    }
}

impl Environment for PointGather {
    type State = PointGatherState;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PointGatherState> {
        let c = &self.config;
        let mut objects: Vec<Object> = Vec::with_capacity(c.n_green + c.n_red);
        let colors = std::iter::repeat_n(Color::Green, c.n_green)
            .chain(std::iter::repeat_n(Color::Red, c.n_red));
        for color in colors {
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let p = [
                    rng.random_range(-c.half_width..c.half_width),
                    rng.random_range(-c.half_width..c.half_width),
                ];
                if norm(p) < c.min_origin_distance {
                    continue;
                }
                if objects
                    .iter()
                    .any(|o| norm([o.pos[0] - p[0], o.pos[1] - p[1]]) < c.min_separation)
                {
                    continue;
                }
                placed = Some(p);
                break;
            }
            let pos = placed.ok_or_else(|| {
                Error::Config(format!(
                    "could not place object {} after {PLACEMENT_ATTEMPTS} samples",
                    objects.len() + 1
                ))
            })?;
            objects.push(Object {
                pos,
                color,
                alive: true,
            });
        }
        Ok(PointGatherState {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            objects,
            steps: 0,
        })
    }

    fn step(&self, state: &mut PointGatherState, action: &[usize]) -> Result<Transition> {
        if self.is_done(state) {
            return Err(Error::Usage("step called on a finished pointgather episode".into()));
        }
        check_len("pointgather action", 2, action.len())?;
        let mut accel = [0.0; 2];
        for (a, &bin) in accel.iter_mut().zip(action) {
            *a = *ACCEL_BINS.get(bin).ok_or_else(|| {
                Error::Usage(format!("pointgather bin {bin} out of range 0..{}", ACCEL_BINS.len()))
            })?;
        }
        let c = &self.config;
        for (v, a) in state.vel.iter_mut().zip(accel) {
            *v = c.damping * *v + a;
        }
        let speed = norm(state.vel);
        if speed > c.v_max {
            let k = c.v_max / speed;
            state.vel.iter_mut().for_each(|v| *v *= k);
        }
        for (p, v) in state.pos.iter_mut().zip(state.vel.iter_mut()) {
            let next = *p + *v;
            if next.abs() > c.half_width {
                *p = next.clamp(-c.half_width, c.half_width);
                *v = 0.0;
            } else {
                *p = next;
            }
        }
        let mut reward = 0.0;
        for obj in state.objects.iter_mut().filter(|o| o.alive) {
            if norm([obj.pos[0] - state.pos[0], obj.pos[1] - state.pos[1]]) < c.touch_radius {
                obj.alive = false;
                reward += match obj.color {
                    Color::Green => 1.0,
                    Color::Red => -1.0,
                };
            }
        }
        state.steps += 1;
        Ok(Transition {
            reward,
            done: state.steps >= c.max_steps,
        })
    }

    fn is_done(&self, state: &PointGatherState) -> bool {
        state.steps >= self.config.max_steps
    }

    /// `[x, y, vx, vy]` followed by the sensor vector.
    fn observe(&self, state: &PointGatherState) -> Vec<f64> {
        let mut obs = self.observe_low(state);
        obs.extend_from_slice(&self.sensors(state));
        obs
    }

    fn observe_low(&self, state: &PointGatherState) -> Vec<f64> {
        vec![state.pos[0], state.pos[1], state.vel[0], state.vel[1]]
    }

    fn obs_dim(&self) -> usize {
        LOW_OBS_DIM + SENSOR_DIM
    }

    fn low_obs_dim(&self) -> usize {
        LOW_OBS_DIM
    }

    /// Planar distance between agent positions.
    fn distance(&self, a: &PointGatherState, b: &PointGatherState) -> f64 {
        norm([a.pos[0] - b.pos[0], a.pos[1] - b.pos[1]])
    }

    fn action_bins(&self) -> Vec<usize> {
        vec![ACCEL_BINS.len(); 2]
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn task_info(&self, start: &PointGatherState, target: &PointGatherState) -> TaskInfo {
        TaskInfo {
            key_picked: false,
            door_opened: false,
            distance: self.distance(start, target),
            target_xy: target.pos,
            start_xy: start.pos,
        }
    }
}

fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env() -> PointGather {
        PointGather::new(PointGatherConfig::default()).unwrap()
    }

    fn empty_state() -> PointGatherState {
        PointGatherState {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            objects: vec![],
            steps: 0,
        }
    }

    #[test]
    fn fresh_reset() {
        let env = env();
        let s = env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.pos, [0.0, 0.0]);
        assert_eq!(s.objects.len(), 16);
        assert!(s.objects.iter().all(|o| o.alive));
        let again = env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn objects_respect_separation() {
        let env = env();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = env.reset(&mut rng).unwrap();
            for (i, a) in s.objects.iter().enumerate() {
                assert!(norm(a.pos) >= 2.0);
                assert!(a.pos.iter().all(|c| c.abs() <= 8.0));
                for b in &s.objects[i + 1..] {
                    assert!(norm([a.pos[0] - b.pos[0], a.pos[1] - b.pos[1]]) >= 1.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_packing_is_config_error() {
        let env = PointGather::new(PointGatherConfig {
            half_width: 2.0,
            n_green: 50,
            ..PointGatherConfig::default()
        })
        .unwrap();
        let err = env.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_action_from_rest_stays_put() {
        let env = env();
        let mut s = empty_state();
        env.step(&mut s, &[2, 2]).unwrap();
        assert_eq!(s.pos, [0.0, 0.0]);
    }

    #[test]
    fn full_acceleration_advances_one_tenth() {
        let env = env();
        let mut s = empty_state();
        env.step(&mut s, &[4, 2]).unwrap();
        assert!((s.pos[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.pos[1], 0.0);
        // second step: v = 0.95 * 0.1 + 0.1
        env.step(&mut s, &[4, 2]).unwrap();
        assert!((s.pos[0] - (0.1 + 0.195)).abs() < 1e-15);
    }

    #[test]
    fn touching_objects_pays() {
        let env = env();
        let mut s = empty_state();
        s.objects = vec![
            Object {
                pos: [0.45, 0.0],
                color: Color::Green,
                alive: true,
            },
            Object {
                pos: [-3.0, 0.0],
                color: Color::Red,
                alive: true,
            },
        ];
        let t = env.step(&mut s, &[4, 2]).unwrap();
        assert_eq!(t.reward, 1.0);
        assert!(!s.objects[0].alive);
        // consumed objects do not pay twice
        let t = env.step(&mut s, &[0, 2]).unwrap();
        assert_eq!(t.reward, 0.0);

        let mut s = empty_state();
        s.pos = [-2.8, 0.0];
        s.objects = vec![Object {
            pos: [-3.0, 0.0],
            color: Color::Red,
            alive: true,
        }];
        assert_eq!(env.step(&mut s, &[2, 2]).unwrap().reward, -1.0);
    }

    #[test]
    fn horizon_and_bad_bins() {
        let env = PointGather::new(PointGatherConfig {
            max_steps: 3,
            ..PointGatherConfig::default()
        })
        .unwrap();
        let mut s = empty_state();
        assert!(matches!(env.step(&mut s, &[5, 0]), Err(Error::Usage(_))));
        assert!(!env.step(&mut s, &[2, 2]).unwrap().done);
        assert!(!env.step(&mut s, &[2, 2]).unwrap().done);
        assert!(env.step(&mut s, &[2, 2]).unwrap().done);
        assert!(env.step(&mut s, &[2, 2]).is_err());
    }

    #[test]
    fn distance_uses_position_only() {
        let env = env();
        let a = empty_state();
        let mut b = empty_state();
        b.pos = [0.3, 0.4];
        b.vel = [0.5, 0.0];
        assert!((env.distance(&a, &b) - 0.5).abs() < 1e-15);
        b.pos = [0.2, 0.1];
        assert!((env.distance(&a, &b) - 0.223_606_797_749_979).abs() < 1e-12);
        assert!(env.distance(&a, &b) <= 0.25);
    }

    #[test]
    fn sensors_see_nearest_in_sector() {
        let env = env();
        let mut s = empty_state();
        s.objects = vec![
            Object {
                pos: [3.0, 0.1],
                color: Color::Green,
                alive: true,
            },
            Object {
                pos: [1.0, 0.1],
                color: Color::Green,
                alive: true,
            },
            Object {
                pos: [-7.0, -0.1],
                color: Color::Red,
                alive: true,
            },
        ];
        let obs = env.observe(&s);
        assert_eq!(obs.len(), 24);
        assert_eq!(&obs[..4], &env.observe_low(&s)[..]);
        let sensors = &obs[4..];
        let nonzero: Vec<_> = sensors.iter().filter(|&&v| v > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        let d = (1.0f64 + 0.01).sqrt();
        assert!((*nonzero[0] - 1.0 / (1.0 + d)).abs() < 1e-12);
        assert!(sensors.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    proptest! {
        #[test]
        fn speed_and_position_stay_bounded(actions in proptest::collection::vec((0usize..5, 0usize..5), 1..400)) {
            let env = env();
            let mut s = empty_state();
            for (a, b) in actions {
                env.step(&mut s, &[a, b]).unwrap();
                prop_assert!(norm(s.vel) <= 0.5 + 1e-12);
                prop_assert!(s.pos.iter().all(|p| p.abs() <= 8.0));
            }
        }

        #[test]
        fn replay_is_reproducible(seed in 0u64..1000, actions in proptest::collection::vec((0usize..5, 0usize..5), 1..100)) {
            let env = env();
            let start = env.reset(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let run = |mut s: PointGatherState| {
                let mut rewards = vec![];
                for &(a, b) in &actions {
                    rewards.push(env.step(&mut s, &[a, b]).unwrap().reward);
                }
                (s, rewards)
            };
            prop_assert_eq!(run(start.clone()), run(start));
        }
    }
}
