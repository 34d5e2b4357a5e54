//! Two-room grid world: pick up the key, unlock the door in the dividing
//! wall, reach the goal in the other room.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, TaskInfo, Transition};
use crate::error::{check_len, Error, Result};

pub const VOCAB: usize = 5;
pub const WORD_AGENT: usize = 0;
pub const WORD_DOOR: usize = 1;
pub const WORD_BLOCK: usize = 2;
pub const WORD_KEY: usize = 3;
pub const WORD_GOAL: usize = 4;

pub const N_ACTIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyDoorAction {
    Up,
    Down,
    Left,
    Right,
    Pick,
    Stop,
}

impl KeyDoorAction {
    pub const ALL: [KeyDoorAction; N_ACTIONS] = [
        KeyDoorAction::Up,
        KeyDoorAction::Down,
        KeyDoorAction::Left,
        KeyDoorAction::Right,
        KeyDoorAction::Pick,
        KeyDoorAction::Stop,
    ];

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Usage(format!("keydoor action {index} out of range 0..{N_ACTIONS}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyDoorConfig {
    pub width: usize,
    pub height: usize,
    pub max_steps: usize,
}

impl Default for KeyDoorConfig {
    fn default() -> Self {
        Self {
            width: 6,
            height: 6,
            max_steps: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyDoorState {
    pub width: usize,
    pub height: usize,
    pub wall_col: usize,
    pub door: Cell,
    pub door_locked: bool,
    /// `None` once the key has been picked up.
    pub key: Option<Cell>,
    pub goal: Cell,
    pub agent: Cell,
    pub has_key: bool,
    pub steps: usize,
}

impl KeyDoorState {
    pub fn is_wall(&self, cell: Cell) -> bool {
        cell.col == self.wall_col && cell != self.door
    }

    pub fn at_goal(&self) -> bool {
        self.agent == self.goal
    }

    fn bit(&self, cell: Cell, word: usize) -> usize {
        (cell.row * self.width + cell.col) * VOCAB + word
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.width * self.height * VOCAB];
        obs[self.bit(self.agent, WORD_AGENT)] = 1.0;
        if self.door_locked {
            obs[self.bit(self.door, WORD_DOOR)] = 1.0;
        }
        for row in 0..self.height {
            let cell = Cell::new(row, self.wall_col);
            if self.is_wall(cell) {
                obs[self.bit(cell, WORD_BLOCK)] = 1.0;
            }
        }
        if let Some(key) = self.key {
            obs[self.bit(key, WORD_KEY)] = 1.0;
        }
        obs[self.bit(self.goal, WORD_GOAL)] = 1.0;
        obs
    }

    /// Rebuilds a state from its observation. `has_key` is inferred from the
    /// missing key bit; the step counter is not observable and is set to 0.
    pub fn decode(width: usize, height: usize, obs: &[f64]) -> Result<Self> {
        check_len("keydoor observation", width * height * VOCAB, obs.len())?;
        let bad = |detail: &str| Error::format("keydoor observation", detail);
        let cells_with = |word: usize| -> Vec<Cell> {
            (0..height)
                .flat_map(|r| (0..width).map(move |c| Cell::new(r, c)))
                .filter(|c| obs[(c.row * width + c.col) * VOCAB + word] != 0.0)
                .collect()
        };
        let agents = cells_with(WORD_AGENT);
        let blocks = cells_with(WORD_BLOCK);
        let keys = cells_with(WORD_KEY);
        let goals = cells_with(WORD_GOAL);
        let doors = cells_with(WORD_DOOR);
        if agents.len() != 1 || goals.len() != 1 || keys.len() > 1 || doors.len() > 1 {
            return Err(bad("expected one agent, one goal, at most one key and one door"));
        }
        let wall_col = blocks.first().ok_or_else(|| bad("no wall"))?.col;
        if blocks.len() + 1 != height || blocks.iter().any(|c| c.col != wall_col) {
            return Err(bad("wall must fill one column except the door"));
        }
        let door_row = (0..height)
            .find(|&r| !blocks.contains(&Cell::new(r, wall_col)))
            .ok_or_else(|| bad("no door cell"))?;
        let door = Cell::new(door_row, wall_col);
        if doors.first().is_some_and(|&d| d != door) {
            return Err(bad("door bit outside the wall gap"));
        }
        Ok(Self {
            width,
            height,
            wall_col,
            door,
            door_locked: !doors.is_empty(),
            key: keys.first().copied(),
            goal: goals[0],
            agent: agents[0],
            has_key: keys.is_empty(),
            steps: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyDoor {
    config: KeyDoorConfig,
}

impl KeyDoor {
    pub fn new(config: KeyDoorConfig) -> Result<Self> {
        if config.width < 4 || config.height < 1 {
            return Err(Error::Config(format!(
                "keydoor grid {}x{} too small: need width >= 4",
                config.width, config.height
            )));
        }
        if config.height < 2 {
            return Err(Error::Config(
                "keydoor left room needs two free cells for agent and key".into(),
            ));
        }
        if config.max_steps == 0 {
            return Err(Error::Config("keydoor max_steps must be positive".into()));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &KeyDoorConfig {
        &self.config
    }

    /// Applies one action to a state that is known to be live.
    fn apply(&self, s: &mut KeyDoorState, action: KeyDoorAction) {
        let (dr, dc): (isize, isize) = match action {
            KeyDoorAction::Up => (-1, 0),
            KeyDoorAction::Down => (1, 0),
            KeyDoorAction::Left => (0, -1),
            KeyDoorAction::Right => (0, 1),
            KeyDoorAction::Pick => {
                if s.key == Some(s.agent) {
                    s.key = None;
                    s.has_key = true;
                }
                return;
            }
            KeyDoorAction::Stop => return,
        };
        let row = s.agent.row as isize + dr;
        let col = s.agent.col as isize + dc;
        if row < 0 || col < 0 || row >= s.height as isize || col >= s.width as isize {
            return;
        }
        let target = Cell::new(row as usize, col as usize);
        if s.is_wall(target) {
            return;
        }
        if target == s.door && s.door_locked {
            if !s.has_key {
                return;
            }
            s.door_locked = false;
        }
        s.agent = target;
    }
}

impl Environment for KeyDoor {
    type State = KeyDoorState;

    fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<KeyDoorState> {
        let KeyDoorConfig { width, height, .. } = self.config;
        let wall_col = rng.random_range(1..width - 1);
        let door = Cell::new(rng.random_range(0..height), wall_col);
        let left: Vec<Cell> = (0..height)
            .flat_map(|r| (0..wall_col).map(move |c| Cell::new(r, c)))
            .collect();
        let right: Vec<Cell> = (0..height)
            .flat_map(|r| (wall_col + 1..width).map(move |c| Cell::new(r, c)))
            .collect();
        if left.len() < 2 || right.is_empty() {
            return Err(Error::Config("keydoor rooms have no free cells".into()));
        }
        let agent_i = rng.random_range(0..left.len());
        let mut key_i = rng.random_range(0..left.len() - 1);
        if key_i >= agent_i {
            key_i += 1;
        }
        let goal = right[rng.random_range(0..right.len())];
        Ok(KeyDoorState {
            width,
            height,
            wall_col,
            door,
            door_locked: true,
            key: Some(left[key_i]),
            goal,
            agent: left[agent_i],
            has_key: false,
            steps: 0,
        })
    }

    fn step(&self, state: &mut KeyDoorState, action: &[usize]) -> Result<Transition> {
        if self.is_done(state) {
            return Err(Error::Usage("step called on a finished keydoor episode".into()));
        }
        check_len("keydoor action", 1, action.len())?;
        let action = KeyDoorAction::from_index(action[0])?;
        self.apply(state, action);
        state.steps += 1;
        let success = state.at_goal();
        Ok(Transition {
            reward: if success { 1.0 } else { 0.0 },
            done: success || state.steps >= self.config.max_steps,
        })
    }

    fn is_done(&self, state: &KeyDoorState) -> bool {
        state.at_goal() || state.steps >= self.config.max_steps
    }

    fn observe(&self, state: &KeyDoorState) -> Vec<f64> {
        state.observation()
    }

    fn observe_low(&self, state: &KeyDoorState) -> Vec<f64> {
        state.observation()
    }

    fn obs_dim(&self) -> usize {
        self.config.width * self.config.height * VOCAB
    }

    fn low_obs_dim(&self) -> usize {
        self.obs_dim()
    }

    /// Euclidean norm of the observation difference.
    fn distance(&self, a: &KeyDoorState, b: &KeyDoorState) -> f64 {
        observation_distance(&a.observation(), &b.observation())
    }

    fn action_bins(&self) -> Vec<usize> {
        vec![N_ACTIONS]
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn task_info(&self, start: &KeyDoorState, target: &KeyDoorState) -> TaskInfo {
        TaskInfo {
            key_picked: !start.has_key && target.has_key,
            door_opened: start.door_locked && !target.door_locked,
            distance: self.distance(start, target),
            target_xy: [target.agent.col as f64, target.agent.row as f64],
            start_xy: [start.agent.col as f64, start.agent.row as f64],
        }
    }
}

pub fn observation_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashSet, VecDeque};

    fn env() -> KeyDoor {
        KeyDoor::new(KeyDoorConfig::default()).unwrap()
    }

    fn fixed() -> KeyDoorState {
        KeyDoorState {
            width: 6,
            height: 6,
            wall_col: 3,
            door: Cell::new(2, 3),
            door_locked: true,
            key: Some(Cell::new(0, 0)),
            goal: Cell::new(4, 5),
            agent: Cell::new(0, 0),
            has_key: false,
            steps: 0,
        }
    }

    fn count(obs: &[f64], word: usize) -> usize {
        obs.chunks(VOCAB).filter(|c| c[word] != 0.0).count()
    }

    #[test]
    fn observation_length_and_bits() {
        let env = env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = env.reset(&mut rng).unwrap();
            let obs = env.observe(&s);
            assert_eq!(obs.len(), 180);
            assert_eq!(count(&obs, WORD_AGENT), 1);
            assert_eq!(count(&obs, WORD_KEY), 1);
            assert_eq!(count(&obs, WORD_GOAL), 1);
            assert_eq!(count(&obs, WORD_DOOR), 1);
            assert_eq!(count(&obs, WORD_BLOCK), 5);
            assert!(s.agent.col < s.wall_col && s.key.unwrap().col < s.wall_col);
            assert!(s.goal.col > s.wall_col);
            assert_ne!(Some(s.agent), s.key);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let env = env();
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_grid_is_rejected() {
        let cfg = KeyDoorConfig {
            width: 3,
            ..KeyDoorConfig::default()
        };
        assert!(matches!(KeyDoor::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pick_on_key_cell() {
        let env = env();
        let mut s = fixed();
        let t = env.step(&mut s, &[KeyDoorAction::Pick.index()]).unwrap();
        assert!(s.has_key);
        assert_eq!(s.key, None);
        assert_eq!(count(&s.observation(), WORD_KEY), 0);
        assert_eq!(t.reward, 0.0);
        assert!(!t.done);
    }

    #[test]
    fn pick_elsewhere_does_nothing() {
        let env = env();
        let mut s = fixed();
        s.agent = Cell::new(1, 1);
        env.step(&mut s, &[KeyDoorAction::Pick.index()]).unwrap();
        assert!(!s.has_key);
    }

    #[test]
    fn locked_door_blocks_without_key() {
        let env = env();
        let mut s = fixed();
        s.agent = Cell::new(2, 2);
        env.step(&mut s, &[KeyDoorAction::Right.index()]).unwrap();
        assert_eq!(s.agent, Cell::new(2, 2));
        assert!(s.door_locked);
    }

    #[test]
    fn walls_and_edges_block() {
        let env = env();
        let mut s = fixed();
        s.agent = Cell::new(0, 2);
        env.step(&mut s, &[KeyDoorAction::Right.index()]).unwrap();
        assert_eq!(s.agent, Cell::new(0, 2));
        s.agent = Cell::new(0, 0);
        env.step(&mut s, &[KeyDoorAction::Up.index()]).unwrap();
        env.step(&mut s, &[KeyDoorAction::Left.index()]).unwrap();
        assert_eq!(s.agent, Cell::new(0, 0));
    }

    #[test]
    fn key_unlocks_and_enters_door() {
        let env = env();
        let mut s = fixed();
        s.agent = Cell::new(2, 2);
        s.has_key = true;
        s.key = None;
        env.step(&mut s, &[KeyDoorAction::Right.index()]).unwrap();
        assert_eq!(s.agent, s.door);
        assert!(!s.door_locked);
        assert_eq!(count(&s.observation(), WORD_DOOR), 0);
    }

    #[test]
    fn reaching_goal_pays_and_ends() {
        let env = env();
        let mut s = fixed();
        s.door_locked = false;
        s.agent = Cell::new(3, 5);
        let t = env.step(&mut s, &[KeyDoorAction::Down.index()]).unwrap();
        assert_eq!(t.reward, 1.0);
        assert!(t.done);
        assert!(matches!(env.step(&mut s, &[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn stop_is_noop_and_horizon_ends_episode() {
        let env = env();
        let mut s = fixed();
        let before = s.observation();
        for i in 0..40 {
            let t = env.step(&mut s, &[KeyDoorAction::Stop.index()]).unwrap();
            assert_eq!(t.done, i == 39);
            assert_eq!(t.reward, 0.0);
        }
        assert_eq!(s.observation(), before);
        assert!(env.step(&mut s, &[5]).is_err());
    }

    #[test]
    fn invalid_action_is_usage_error() {
        let env = env();
        let mut s = fixed();
        assert!(matches!(env.step(&mut s, &[6]), Err(Error::Usage(_))));
    }

    #[test]
    fn distances() {
        let env = env();
        let a = fixed();
        assert_eq!(env.distance(&a, &a), 0.0);
        let mut b = a.clone();
        b.agent = Cell::new(1, 0);
        assert!((env.distance(&a, &b) - 2f64.sqrt()).abs() < 1e-12);
        let mut c = a.clone();
        c.door_locked = false;
        assert_eq!(env.distance(&a, &c), 1.0);
    }

    #[test]
    fn decode_round_trips() {
        let env = env();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let mut s = env.reset(&mut rng).unwrap();
            for _ in 0..10 {
                let a = rng.random_range(0..N_ACTIONS);
                if env.step(&mut s, &[a]).unwrap().done {
                    break;
                }
            }
            let mut decoded = KeyDoorState::decode(6, 6, &s.observation()).unwrap();
            decoded.steps = s.steps;
            assert_eq!(decoded, s);
        }
    }

    /// Breadth-first search over (agent, has_key, door_locked, key) states.
    fn bfs_solves(env: &KeyDoor, start: &KeyDoorState) -> Option<usize> {
        let mut seen = HashSet::new();
        let mut queue = VecDeque::new();
        let mut s0 = start.clone();
        s0.steps = 0;
        queue.push_back((s0.clone(), 0));
        seen.insert(s0);
        while let Some((s, d)) = queue.pop_front() {
            for a in 0..5 {
                let mut n = s.clone();
                n.steps = 0;
                env.apply(&mut n, KeyDoorAction::ALL[a]);
                if n.at_goal() {
                    return Some(d + 1);
                }
                if seen.insert(n.clone()) {
                    queue.push_back((n, d + 1));
                }
            }
        }
        None
    }

    #[test]
    fn every_reset_is_solvable_within_horizon() {
        let env = env();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let s = env.reset(&mut rng).unwrap();
            let d = bfs_solves(&env, &s).expect("reachable goal");
            assert!(d <= 40);
        }
    }

    #[test]
    fn scripted_solution_succeeds() {
        let env = env();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut s = env.reset(&mut rng).unwrap();
            let walk = |s: &mut KeyDoorState, to: Cell| {
                while s.agent.col < to.col {
                    env.step(s, &[KeyDoorAction::Right.index()]).unwrap();
                }
                while s.agent.col > to.col {
                    env.step(s, &[KeyDoorAction::Left.index()]).unwrap();
                }
                while s.agent.row < to.row {
                    env.step(s, &[KeyDoorAction::Down.index()]).unwrap();
                }
                while s.agent.row > to.row {
                    env.step(s, &[KeyDoorAction::Up.index()]).unwrap();
                }
            };
            let key = s.key.unwrap();
            walk(&mut s, key);
            env.step(&mut s, &[KeyDoorAction::Pick.index()]).unwrap();
            let before_door = Cell::new(s.door.row, s.wall_col - 1);
            walk(&mut s, before_door);
            env.step(&mut s, &[KeyDoorAction::Right.index()]).unwrap();
            let goal = s.goal;
            // step out of the door column first, then head for the goal
            env.step(&mut s, &[KeyDoorAction::Right.index()]).unwrap();
            if !s.at_goal() {
                walk(&mut s, goal);
            }
            assert!(s.at_goal(), "{s:?}");
            assert!(s.steps <= 40);
        }
    }
}
