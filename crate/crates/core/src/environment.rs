//! Deterministic MDP oracles shared by every node.
//!
//! All nodes must agree on `step` bit-for-bit, otherwise blocks cannot be
//! verified by peers. [`GridWorld`] is the concrete oracle used by the
//! simulator; [`value_iteration_oracle`] solves it exactly for tests.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashchain::{ActionId, Block, EnvState, Reward};

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_count: usize,
    pub initial_state: EnvState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: Reward,
    pub terminal: bool,
}

impl StepResult {
    /// Exact comparison: state entries and reward by bit pattern.
    pub fn bit_eq(&self, other: &StepResult) -> bool {
        self.next_state.bit_eq(&other.next_state)
            && self.reward.to_bits() == other.reward.to_bits()
            && self.terminal == other.terminal
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} out of range for {count} actions")]
    InvalidAction { action: ActionId, count: usize },
    #[error("invalid state {0:?}")]
    InvalidState(Vec<f64>),
    #[error("invalid gridworld config: {0}")]
    InvalidConfig(String),
    #[error("value iteration did not converge within {sweeps} sweeps (residual {residual})")]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("state {0:?} is not in the table")]
    UnknownState(Vec<f64>),
}

/// A deterministic environment that supplies transitions and rewards.
pub trait Oracle: Send + Sync {
    fn spec(&self) -> &OracleSpec;

    fn step(&self, state: &EnvState, action: ActionId) -> Result<StepResult, EnvError>;

    /// Whether reaching `state` ends an episode.
    fn is_terminal(&self, state: &EnvState) -> bool;

    /// Self-describing configuration, embedded in chain dumps.
    fn descriptor(&self) -> OracleDescriptor;

    fn verify_transition(
        &self,
        state: &EnvState,
        action: ActionId,
        claimed: &StepResult,
    ) -> Result<bool, EnvError> {
        Ok(self.step(state, action)?.bit_eq(claimed))
    }

    /// State from which the successor of `parent` is mined. Episodes chain
    /// across blocks: after a terminal block the next one starts over from
    /// the initial state.
    fn origin_state(&self, parent: &Block) -> EnvState {
        if !parent.is_genesis() && self.is_terminal(&parent.state) {
            self.spec().initial_state.clone()
        } else {
            parent.state.clone()
        }
    }
}

/// Serializable oracle configuration; the header of every chain dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "oracle", rename_all = "snake_case")]
pub enum OracleDescriptor {
    Gridworld(GridWorldConfig),
    Menu(MenuConfig),
}

impl OracleDescriptor {
    pub fn build(&self) -> Result<Box<dyn Oracle>, EnvError> {
        match self {
            OracleDescriptor::Gridworld(cfg) => Ok(Box::new(GridWorld::new(cfg.clone())?)),
            OracleDescriptor::Menu(cfg) => Ok(Box::new(MenuOracle::new(cfg.clone())?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuConfig {
    pub rewards: Vec<f64>,
}

/// Single-state oracle where action `i` always pays `rewards[i]`. Handy
/// for building chains with chosen reward sequences.
#[derive(Clone, Debug)]
pub struct MenuOracle {
    config: MenuConfig,
    spec: OracleSpec,
}

impl MenuOracle {
    pub fn new(config: MenuConfig) -> Result<Self, EnvError> {
        if config.rewards.is_empty() || !config.rewards.iter().all(|r| r.is_finite()) {
            return Err(EnvError::InvalidConfig("menu needs at least one finite reward".into()));
        }
        let spec = OracleSpec {
            name: "menu".into(),
            state_dim: 1,
            action_count: config.rewards.len(),
            initial_state: EnvState(vec![0.0]),
        };
        Ok(Self { config, spec })
    }

    /// Action paying exactly `reward`, if any.
    pub fn action_for(&self, reward: f64) -> Option<ActionId> {
        self.config
            .rewards
            .iter()
            .position(|r| r.to_bits() == reward.to_bits())
            .map(|i| ActionId(i as u32))
    }
}

impl Oracle for MenuOracle {
    fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    fn step(&self, state: &EnvState, action: ActionId) -> Result<StepResult, EnvError> {
        let reward = *self
            .config
            .rewards
            .get(action.index())
            .filter(|_| !action.is_none())
            .ok_or(EnvError::InvalidAction { action, count: self.config.rewards.len() })?;
        if !state.bit_eq(&self.spec.initial_state) {
            return Err(EnvError::InvalidState(state.values().to_vec()));
        }
        Ok(StepResult { next_state: state.clone(), reward, terminal: false })
    }

    fn is_terminal(&self, _state: &EnvState) -> bool {
        false
    }

    fn descriptor(&self) -> OracleDescriptor {
        OracleDescriptor::Menu(self.config.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldConfig {
    pub width: u32,
    pub height: u32,
    pub start: [u32; 2],
    pub goal: [u32; 2],
    pub step_reward: f64,
    pub goal_reward: f64,
    pub walls: Vec<[u32; 2]>,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            width: 4,
            height: 4,
            start: [0, 0],
            goal: [3, 3],
            step_reward: -0.04,
            goal_reward: 1.0,
            walls: Vec::new(),
        }
    }
}

/// Grid moves, in action-id order. `y` grows downward.
pub const MOVES: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
pub const ACTION_NAMES: [&str; 4] = ["up", "right", "down", "left"];

/// Rectangular grid with walls. State is `[x, y]` as reals.
#[derive(Clone, Debug)]
pub struct GridWorld {
    config: GridWorldConfig,
    walls: HashSet<[u32; 2]>,
    spec: OracleSpec,
}

impl GridWorld {
    pub fn new(config: GridWorldConfig) -> Result<Self, EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if config.width == 0 || config.height == 0 {
            return bad("grid dimensions must be positive".into());
        }
        let inside = |c: [u32; 2]| c[0] < config.width && c[1] < config.height;
        if !inside(config.start) || !inside(config.goal) {
            return bad("start and goal must lie inside the grid".into());
        }
        if config.start == config.goal {
            return bad("start and goal must differ".into());
        }
        if !config.step_reward.is_finite() || !config.goal_reward.is_finite() {
            return bad("rewards must be finite".into());
        }
        let walls: HashSet<[u32; 2]> = config.walls.iter().copied().collect();
        if walls.contains(&config.start) || walls.contains(&config.goal) {
            return bad("start and goal must not be walls".into());
        }
        if let Some(w) = walls.iter().find(|w| !inside(**w)) {
            return bad(format!("wall {w:?} lies outside the grid"));
        }
        let spec = OracleSpec {
            name: "gridworld".into(),
            state_dim: 2,
            action_count: MOVES.len(),
            initial_state: Self::encode(config.start),
        };
        Ok(Self { config, walls, spec })
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn encode(cell: [u32; 2]) -> EnvState {
        EnvState(vec![cell[0] as f64, cell[1] as f64])
    }

    /// Parses a state into an open (non-wall) cell.
    pub fn decode(&self, state: &EnvState) -> Option<[u32; 2]> {
        let v = state.values();
        if v.len() != 2 {
            return None;
        }
        let coord = |x: f64, bound: u32| {
            (x.fract() == 0.0 && x >= 0.0 && x < bound as f64).then_some(x as u32)
        };
        let cell = [coord(v[0], self.config.width)?, coord(v[1], self.config.height)?];
        (!self.walls.contains(&cell)).then_some(cell)
    }

    pub fn goal_state(&self) -> EnvState {
        Self::encode(self.config.goal)
    }

    /// Every open, non-goal cell: the states a transition can start from.
    pub fn states(&self) -> Vec<EnvState> {
        let mut out = Vec::new();
        for y in 0..self.config.height {
            for x in 0..self.config.width {
                let c = [x, y];
                if c != self.config.goal && !self.walls.contains(&c) {
                    out.push(Self::encode(c));
                }
            }
        }
        out
    }

    fn moved(&self, cell: [u32; 2], action: ActionId) -> [u32; 2] {
        let (dx, dy) = MOVES[action.index()];
        let nx = cell[0] as i64 + dx;
        let ny = cell[1] as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.config.width as i64 || ny >= self.config.height as i64 {
            return cell;
        }
        let next = [nx as u32, ny as u32];
        if self.walls.contains(&next) {
            cell
        } else {
            next
        }
    }

    /// Shortest start-to-goal path length by breadth-first search.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut seen = HashSet::from([self.config.start]);
        let mut frontier = vec![self.config.start];
        let mut depth = 0;
        while !frontier.is_empty() {
            if frontier.contains(&self.config.goal) {
                return Some(depth);
            }
            let mut next = Vec::new();
            for c in frontier {
                for a in 0..MOVES.len() as u32 {
                    let n = self.moved(c, ActionId(a));
                    if seen.insert(n) {
                        next.push(n);
                    }
                }
            }
            frontier = next;
            depth += 1;
        }
        None
    }
}

impl Oracle for GridWorld {
    fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    fn step(&self, state: &EnvState, action: ActionId) -> Result<StepResult, EnvError> {
        if action.index() >= MOVES.len() || action.is_none() {
            return Err(EnvError::InvalidAction { action, count: MOVES.len() });
        }
        let cell = self
            .decode(state)
            .filter(|c| *c != self.config.goal)
            .ok_or_else(|| EnvError::InvalidState(state.values().to_vec()))?;
        let next = self.moved(cell, action);
        let terminal = next == self.config.goal;
        Ok(StepResult {
            next_state: Self::encode(next),
            reward: if terminal { self.config.goal_reward } else { self.config.step_reward },
            terminal,
        })
    }

    fn is_terminal(&self, state: &EnvState) -> bool {
        self.decode(state) == Some(self.config.goal)
    }

    fn descriptor(&self) -> OracleDescriptor {
        OracleDescriptor::Gridworld(self.config.clone())
    }
}

/// Action values for a finite set of states, keyed by the exact bit pattern
/// of the state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    action_count: usize,
    entries: BTreeMap<Vec<u64>, Vec<f64>>,
}

fn key(state: &EnvState) -> Vec<u64> {
    state.values().iter().map(|v| v.to_bits()).collect()
}

impl QTable {
    /// Zero-initialized table over `states`.
    pub fn new(states: &[EnvState], action_count: usize) -> Self {
        let entries = states.iter().map(|s| (key(s), vec![0.0; action_count])).collect();
        Self { action_count, entries }
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, state: &EnvState) -> Option<&[f64]> {
        self.entries.get(&key(state)).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, state: &EnvState) -> Option<&mut [f64]> {
        self.entries.get_mut(&key(state)).map(Vec::as_mut_slice)
    }

    pub fn states(&self) -> impl Iterator<Item = EnvState> + '_ {
        self.entries
            .keys()
            .map(|k| EnvState(k.iter().map(|b| f64::from_bits(*b)).collect()))
    }

    /// Largest absolute entry-wise difference. Tables must cover the same states.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        assert_eq!(self.entries.len(), other.entries.len(), "tables cover different states");
        self.entries
            .iter()
            .map(|(k, row)| {
                let o = other.entries.get(k).expect("tables cover different states");
                row.iter().zip(o).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn greedy(&self, state: &EnvState) -> Option<ActionId> {
        self.get(state).map(|row| ActionId(argmax(row) as u32))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

const MAX_SWEEPS: usize = 100_000;

/// Solves the Bellman optimality equation by in-place sweeps until the
/// largest change in a sweep falls below `tolerance`. Terminal transitions
/// do not bootstrap.
pub fn value_iteration_oracle(
    world: &GridWorld,
    gamma: f64,
    tolerance: f64,
) -> Result<QTable, EnvError> {
    value_iteration_capped(world, gamma, tolerance, MAX_SWEEPS)
}

fn value_iteration_capped(
    world: &GridWorld,
    gamma: f64,
    tolerance: f64,
    max_sweeps: usize,
) -> Result<QTable, EnvError> {
    let states = world.states();
    let actions = world.spec().action_count;
    let mut table = QTable::new(&states, actions);
    let transitions: Vec<Vec<StepResult>> = states
        .iter()
        .map(|s| (0..actions as u32).map(|a| world.step(s, ActionId(a))).collect())
        .collect::<Result<_, _>>()?;

    let mut residual = f64::INFINITY;
    for _ in 0..max_sweeps {
        residual = 0.0;
        for (s, outcomes) in states.iter().zip(&transitions) {
            for (a, out) in outcomes.iter().enumerate() {
                let future = if out.terminal {
                    0.0
                } else {
                    table.get(&out.next_state).expect("closed state set").iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                let updated = out.reward + gamma * future;
                let slot = &mut table.get_mut(s).expect("state in table")[a];
                residual = residual.max((updated - *slot).abs());
                *slot = updated;
            }
        }
        if residual < tolerance {
            return Ok(table);
        }
    }
    Err(EnvError::NonConvergence { sweeps: max_sweeps, residual })
}

/// Number of steps a deterministic policy needs to walk from the initial
/// state to a terminal state, or `None` if it does not arrive within
/// `max_steps`.
pub fn greedy_path_len(
    oracle: &dyn Oracle,
    mut policy: impl FnMut(&EnvState) -> ActionId,
    max_steps: usize,
) -> Option<usize> {
    let mut state = oracle.spec().initial_state.clone();
    for n in 1..=max_steps {
        let step = oracle.step(&state, policy(&state)).ok()?;
        if step.terminal {
            return Some(n);
        }
        state = step.next_state;
    }
    None
}
