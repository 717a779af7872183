//! The mining agent.
//!
//! Mining a block is one deep Q-learning iteration: pick an action
//! epsilon-greedily, step the oracle, record the transition in a block and
//! in the replay buffer, take one SGD step on a sampled batch, and refresh
//! the target network every `sync_interval` iterations.
//!
//! [`tabular_q_update`] is the plain table form of the same update and is
//! used as a reference in tests.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{argmax, EnvError, GridWorld, Oracle, QTable};
use crate::hashchain::{validate_chain, ActionId, Block, BlockHash, Chain, EnvState, Payload, Reward, ValidationFailure};
use crate::mlp::{self, MlpError, NetworkParams};

#[derive(Debug, Error, PartialEq)]
pub enum DqnError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("chain is invalid: {0}")]
    InvalidChain(#[from] ValidationFailure),
    #[error("invalid learning config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Target network refresh period, in iterations.
    pub sync_interval: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden_sizes: Vec<usize>,
    pub seed: u64,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            gamma: 0.9,
            epsilon: 0.1,
            sync_interval: 50,
            batch_size: 32,
            buffer_capacity: 10_000,
            hidden_sizes: vec![32, 32],
            seed: 42,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |m: &str| Err(DqnError::Config(m.to_owned()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.sync_interval == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("sync_interval, batch_size and buffer_capacity must be positive");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: EnvState,
    pub a: ActionId,
    pub r: Reward,
    pub s_next: EnvState,
    pub terminal: bool,
}

impl Transition {
    /// Transition recorded by `block`, mined on top of `parent`.
    pub fn from_blocks(parent: &Block, block: &Block, oracle: &dyn Oracle) -> Self {
        Self {
            s: oracle.origin_state(parent),
            a: block.action,
            r: block.reward,
            s_next: block.state.clone(),
            terminal: oracle.is_terminal(&block.state),
        }
    }
}

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(4096)), capacity, inserted: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes since creation, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Transition> {
        assert!(!self.items.is_empty(), "cannot sample an empty buffer");
        (0..n).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect()
    }
}

/// Per-node learner: prediction and target networks, replay, RNG.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub prediction: NetworkParams,
    pub target: NetworkParams,
    pub replay: ReplayBuffer,
    pub iteration_count: u64,
    pub gradient_steps: u64,
    pub last_loss: Option<f64>,
    config: LearningConfig,
    rng: ChaCha8Rng,
    /// Blocks whose transitions are already in `replay`.
    contributed: HashSet<BlockHash>,
}

impl AgentState {
    pub fn new(config: LearningConfig, oracle: &dyn Oracle) -> Result<Self, DqnError> {
        config.validate()?;
        let spec = oracle.spec();
        let prediction = mlp::init_params(spec.state_dim, &config.hidden_sizes, spec.action_count, config.seed);
        let target = mlp::copy_params(&prediction);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            prediction,
            target,
            replay: ReplayBuffer::new(config.buffer_capacity),
            iteration_count: 0,
            gradient_steps: 0,
            last_loss: None,
            config,
            rng,
            contributed: HashSet::new(),
        })
    }

    pub fn config(&self) -> &LearningConfig {
        &self.config
    }

    pub fn q_values(&self, state: &EnvState) -> Result<Vec<f64>, MlpError> {
        mlp::forward(&self.prediction, state.values())
    }

    /// Greedy action, lowest id on ties.
    pub fn greedy_action(&self, state: &EnvState) -> Result<ActionId, MlpError> {
        Ok(ActionId(argmax(&self.q_values(state)?) as u32))
    }

    /// Epsilon-greedy action. One uniform draw decides explore vs exploit;
    /// exploring draws the action uniformly.
    pub fn select_action(&mut self, state: &EnvState) -> Result<ActionId, MlpError> {
        let u: f64 = self.rng.random();
        if u < self.config.epsilon {
            let n = self.prediction.output_dim() as u32;
            Ok(ActionId(self.rng.random_range(0..n)))
        } else {
            self.greedy_action(state)
        }
    }

    /// One proof-of-work iteration on top of `tip`.
    pub fn mine_one_block(
        &mut self,
        oracle: &dyn Oracle,
        tip: &Block,
        payload: Payload,
        author: u32,
    ) -> Result<Block, DqnError> {
        let origin = oracle.origin_state(tip);
        let action = self.select_action(&origin)?;
        let step = oracle.step(&origin, action)?;
        let block = Block {
            height: tip.height + 1,
            state: step.next_state.clone(),
            action,
            reward: step.reward,
            payload,
            prev_hash: tip.hash(),
            author,
        };
        self.replay.push(Transition {
            s: origin,
            a: action,
            r: step.reward,
            s_next: step.next_state,
            terminal: step.terminal,
        });
        self.contributed.insert(block.hash());
        self.train()?;
        Ok(block)
    }

    /// Gradient step (after warm-up), iteration count, target refresh.
    fn train(&mut self) -> Result<(), DqnError> {
        if self.replay.len() >= self.config.batch_size {
            let batch = self.replay.sample(self.config.batch_size, &mut self.rng);
            let (loss, grads) =
                mlp::loss_and_gradients(&self.prediction, &self.target, &batch, self.config.gamma)?;
            self.prediction = mlp::sgd_step(&self.prediction, &grads, self.config.alpha)?;
            self.gradient_steps += 1;
            self.last_loss = Some(loss);
        }
        self.iteration_count += 1;
        if self.iteration_count % self.config.sync_interval == 0 {
            self.target = mlp::copy_params(&self.prediction);
        }
        Ok(())
    }

    /// Adds the transitions of an adopted chain to the replay buffer,
    /// oldest first, skipping blocks already contributed. Returns the
    /// number of transitions added. The networks are left untouched.
    pub fn rebuild_replay_from_chain(&mut self, chain: &Chain, oracle: &dyn Oracle) -> Result<usize, DqnError> {
        validate_chain(chain, oracle)?;
        Ok(self.absorb_validated_chain(chain, oracle))
    }

    /// [`Self::rebuild_replay_from_chain`] for a chain the caller has validated.
    pub fn absorb_validated_chain(&mut self, chain: &Chain, oracle: &dyn Oracle) -> usize {
        let mut added = 0;
        for pair in chain.blocks().windows(2) {
            if self.contributed.insert(pair[1].hash()) {
                self.replay.push(Transition::from_blocks(&pair[0], &pair[1], oracle));
                added += 1;
            }
        }
        added
    }
}

/// One application of the tabular Q-learning update to the entry
/// `(t.s, t.a)`. A terminal successor contributes no future value.
pub fn tabular_q_update(table: &mut QTable, t: &Transition, alpha: f64, gamma: f64) -> Result<(), EnvError> {
    let future = if t.terminal {
        0.0
    } else {
        table
            .get(&t.s_next)
            .ok_or_else(|| EnvError::UnknownState(t.s_next.values().to_vec()))?
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let row = table.get_mut(&t.s).ok_or_else(|| EnvError::UnknownState(t.s.values().to_vec()))?;
    let q = row
        .get_mut(t.a.index())
        .ok_or(EnvError::InvalidAction { action: t.a, count: 0 })?;
    *q += alpha * (t.r + gamma * future - *q);
    Ok(())
}

/// Settings for [`run_tabular_q_learning`]. Exploration decays linearly
/// from `epsilon_start` to `epsilon_end` over the run.
#[derive(Clone, Debug)]
pub struct TabularRun {
    pub updates: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub seed: u64,
}

/// Runs epsilon-greedy tabular Q-learning on a grid world with episode
/// chaining (a terminal step restarts from the initial state).
pub fn run_tabular_q_learning(world: &GridWorld, run: &TabularRun) -> Result<QTable, EnvError> {
    let actions = world.spec().action_count;
    let mut table = QTable::new(&world.states(), actions);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut state = world.spec().initial_state.clone();
    for i in 0..run.updates {
        let frac = if run.updates > 1 { i as f64 / (run.updates - 1) as f64 } else { 1.0 };
        let eps = run.epsilon_start + (run.epsilon_end - run.epsilon_start) * frac;
        let action = if rng.random::<f64>() < eps {
            ActionId(rng.random_range(0..actions as u32))
        } else {
            table.greedy(&state).ok_or_else(|| EnvError::UnknownState(state.values().to_vec()))?
        };
        let step = world.step(&state, action)?;
        let t = Transition { s: state, a: action, r: step.reward, s_next: step.next_state, terminal: step.terminal };
        tabular_q_update(&mut table, &t, run.alpha, run.gamma)?;
        state = if t.terminal { world.spec().initial_state.clone() } else { t.s_next };
    }
    Ok(table)
}
