//! A blockchain whose proof-of-work is one deep Q-learning iteration.
//!
//! Blocks record MDP transitions supplied by a shared deterministic
//! [`environment::Oracle`]; mining trains each node's Q-network
//! ([`dqn`], [`mlp`]); [`consensus`] prefers the longest chain and breaks
//! ties by reward. [`netsim`] drives many [`node`]s through a seeded
//! discrete-event network.

pub mod consensus;
pub mod dqn;
pub mod dump;
pub mod environment;
pub mod hashchain;
pub mod mlp;
pub mod netsim;
pub mod node;

pub use consensus::{compute_awards, fork_choice, LedgerEntry, TieBreakRule};
pub use dqn::{AgentState, LearningConfig, ReplayBuffer, Transition};
pub use environment::{GridWorld, GridWorldConfig, Oracle, OracleDescriptor, StepResult};
pub use hashchain::{validate_chain, ActionId, Block, BlockHash, Chain, EnvState, Payload};
pub use mlp::NetworkParams;
pub use netsim::{run_attack_scenario, run_simulation, SimConfig, SimReport};
