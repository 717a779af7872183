//! Per-node state machine.
//!
//! A node owns its agent and its local chain and reacts to three inputs:
//! a request to start mining, a finished mining job, and a chain
//! announcement from a peer. It never talks to the network itself; the
//! driver (the simulator, or a real transport) routes its outputs.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::consensus::{choose_validated, Choice, Decision, TieBreakRule};
use crate::dqn::AgentState;
use crate::environment::Oracle;
use crate::hashchain::{validate_announced, Block, BlockHash, Chain};

#[derive(Clone, Debug, PartialEq)]
pub struct MiningJob {
    pub job_id: u64,
    pub tip: BlockHash,
    pub finish_time: f64,
}

#[derive(Clone, Debug)]
pub enum NodeInput {
    StartMining,
    /// A block produced by this node's pending job.
    MiningFinished(Block),
    ChainAnnounced { chain: Arc<Chain>, tip: BlockHash, from: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IgnoreReason {
    Shorter,
    LostTieBreak,
    Invalid(String),
    /// The announced chain is the one already held.
    AlreadyCurrent,
    /// A mined block no longer extends the local tip.
    Stale,
}

#[derive(Clone, Debug)]
pub enum NodeOutput {
    Announce { chain: Arc<Chain>, tip: BlockHash },
    RequestMining(Block),
    Ignore(IgnoreReason),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeStats {
    pub mined: u64,
    pub adoptions: u64,
    /// Adoptions that discarded at least one local block.
    pub forks: u64,
    /// Discarded-block count per reorg -> occurrences.
    pub reorg_depths: BTreeMap<u64, u64>,
    pub ignored: u64,
    pub invalid_received: u64,
}

#[derive(Clone, Debug)]
pub struct NodeHandle {
    pub id: u32,
    pub agent: AgentState,
    chain: Arc<Chain>,
    pub pending: Option<MiningJob>,
    pub stats: NodeStats,
}

impl NodeHandle {
    pub fn new(id: u32, agent: AgentState, oracle: &dyn Oracle) -> Self {
        Self { id, agent, chain: Arc::new(Chain::new(oracle)), pending: None, stats: NodeStats::default() }
    }

    pub fn with_chain(id: u32, agent: AgentState, chain: Chain) -> Self {
        Self { id, agent, chain: Arc::new(chain), pending: None, stats: NodeStats::default() }
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn shared_chain(&self) -> Arc<Chain> {
        Arc::clone(&self.chain)
    }

    pub fn handle_input(&mut self, input: NodeInput, oracle: &dyn Oracle, rule: TieBreakRule) -> Vec<NodeOutput> {
        match input {
            NodeInput::StartMining => vec![NodeOutput::RequestMining(self.chain.tip().clone())],
            NodeInput::MiningFinished(block) => self.on_mined(block, oracle),
            NodeInput::ChainAnnounced { chain, tip, .. } => self.on_announced(chain, tip, oracle, rule),
        }
    }

    fn on_mined(&mut self, block: Block, oracle: &dyn Oracle) -> Vec<NodeOutput> {
        let chain = Arc::make_mut(&mut self.chain);
        if chain.append(block, oracle).is_err() {
            self.stats.ignored += 1;
            return vec![NodeOutput::Ignore(IgnoreReason::Stale)];
        }
        self.stats.mined += 1;
        self.pending = None;
        let tip = self.chain.tip_digest();
        vec![
            NodeOutput::Announce { chain: self.shared_chain(), tip },
            NodeOutput::RequestMining(self.chain.tip().clone()),
        ]
    }

    fn on_announced(
        &mut self,
        candidate: Arc<Chain>,
        announced_tip: BlockHash,
        oracle: &dyn Oracle,
        rule: TieBreakRule,
    ) -> Vec<NodeOutput> {
        let ignore = |stats: &mut NodeStats, why| {
            stats.ignored += 1;
            vec![NodeOutput::Ignore(why)]
        };
        // cheap rejections before full validation
        if candidate.len() < self.chain.len() {
            return ignore(&mut self.stats, IgnoreReason::Shorter);
        }
        if announced_tip == self.chain.tip_digest() && *candidate == *self.chain {
            return ignore(&mut self.stats, IgnoreReason::AlreadyCurrent);
        }
        if let Err(e) = validate_announced(&candidate, &announced_tip, oracle) {
            self.stats.invalid_received += 1;
            return ignore(&mut self.stats, IgnoreReason::Invalid(e.to_string()));
        }
        match choose_validated(&self.chain, &candidate, rule) {
            (Choice::Local, Decision::Identical) => ignore(&mut self.stats, IgnoreReason::AlreadyCurrent),
            (Choice::Local, _) => ignore(&mut self.stats, IgnoreReason::LostTieBreak),
            (Choice::Candidate, _) => {
                let common = self.chain.common_ancestor_height(&candidate).unwrap_or(0);
                let depth = self.chain.height() - common;
                if depth > 0 {
                    self.stats.forks += 1;
                    *self.stats.reorg_depths.entry(depth).or_insert(0) += 1;
                }
                self.stats.adoptions += 1;
                self.agent.absorb_validated_chain(&candidate, oracle);
                self.chain = candidate;
                vec![NodeOutput::RequestMining(self.chain.tip().clone())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dqn::LearningConfig;
    use crate::environment::{GridWorld, GridWorldConfig};
    use crate::hashchain::Payload;

    fn grid() -> GridWorld {
        GridWorld::new(GridWorldConfig::default()).unwrap()
    }

    fn node(id: u32, oracle: &GridWorld) -> NodeHandle {
        let agent = AgentState::new(LearningConfig { seed: 100 + id as u64, ..Default::default() }, oracle).unwrap();
        NodeHandle::new(id, agent, oracle)
    }

    fn mine(n: &mut NodeHandle, oracle: &GridWorld, blocks: usize) {
        for _ in 0..blocks {
            let tip = n.chain().tip().clone();
            let b = n.agent.mine_one_block(oracle, &tip, Payload::new(vec![n.id as u8]).unwrap(), n.id).unwrap();
            n.handle_input(NodeInput::MiningFinished(b), oracle, TieBreakRule::LastReward);
        }
    }

    fn announce(from: &NodeHandle) -> NodeInput {
        NodeInput::ChainAnnounced { chain: from.shared_chain(), tip: from.chain().tip_digest(), from: from.id }
    }

    #[test]
    fn start_mining_requests_tip() {
        let oracle = grid();
        let mut n = node(0, &oracle);
        let out = n.handle_input(NodeInput::StartMining, &oracle, TieBreakRule::LastReward);
        assert!(matches!(&out[..], [NodeOutput::RequestMining(b)] if b.height == 0));
    }

    #[test]
    fn mined_block_is_announced() {
        let oracle = grid();
        let mut n = node(0, &oracle);
        let tip = n.chain().tip().clone();
        let b = n.agent.mine_one_block(&oracle, &tip, Payload::empty(), 0).unwrap();
        let out = n.handle_input(NodeInput::MiningFinished(b), &oracle, TieBreakRule::LastReward);
        assert_eq!(n.chain().height(), 1);
        match &out[..] {
            [NodeOutput::Announce { chain, tip }, NodeOutput::RequestMining(next)] => {
                assert_eq!(*tip, chain.tip_digest());
                assert_eq!(next.height, 1);
            }
            other => panic!("unexpected outputs {other:?}"),
        }
    }

    #[test]
    fn stale_block_ignored() {
        let oracle = grid();
        let mut n = node(0, &oracle);
        let genesis = n.chain().tip().clone();
        let b1 = n.agent.mine_one_block(&oracle, &genesis, Payload::empty(), 0).unwrap();
        let b1_again = n.agent.mine_one_block(&oracle, &genesis, Payload::new(vec![1]).unwrap(), 0).unwrap();
        n.handle_input(NodeInput::MiningFinished(b1), &oracle, TieBreakRule::LastReward);
        let out = n.handle_input(NodeInput::MiningFinished(b1_again), &oracle, TieBreakRule::LastReward);
        assert!(matches!(&out[..], [NodeOutput::Ignore(IgnoreReason::Stale)]));
        assert_eq!(n.chain().height(), 1);
    }

    #[test]
    fn adopts_longer_chain() {
        let oracle = grid();
        let mut a = node(0, &oracle);
        let mut b = node(1, &oracle);
        mine(&mut a, &oracle, 3);
        mine(&mut b, &oracle, 5);
        let out = a.handle_input(announce(&b), &oracle, TieBreakRule::LastReward);
        assert!(matches!(&out[..], [NodeOutput::RequestMining(t)] if t.height == 5));
        assert_eq!(a.chain(), b.chain());
        assert_eq!(a.stats.forks, 1);
        assert_eq!(a.stats.reorg_depths.get(&3), Some(&1));
    }

    #[test]
    fn shorter_chain_ignored() {
        let oracle = grid();
        let mut a = node(0, &oracle);
        let mut b = node(1, &oracle);
        mine(&mut a, &oracle, 5);
        mine(&mut b, &oracle, 2);
        let out = a.handle_input(announce(&b), &oracle, TieBreakRule::LastReward);
        assert!(matches!(&out[..], [NodeOutput::Ignore(IgnoreReason::Shorter)]));
        assert_eq!(a.chain().height(), 5);
    }

    #[test]
    fn tampered_announcement_is_invalid() {
        let oracle = grid();
        let mut a = node(0, &oracle);
        let mut b = node(1, &oracle);
        mine(&mut b, &oracle, 4);
        let mut forged = b.chain().clone();
        forged.blocks_mut()[2].payload = Payload::new(b"forged".to_vec()).unwrap();
        let input = NodeInput::ChainAnnounced { tip: forged.tip_digest(), chain: Arc::new(forged), from: 1 };
        let out = a.handle_input(input, &oracle, TieBreakRule::LastReward);
        assert!(matches!(&out[..], [NodeOutput::Ignore(IgnoreReason::Invalid(_))]));
        assert_eq!(a.chain().height(), 0);

        // a tip digest that disagrees with the chain is rejected as well
        let input = NodeInput::ChainAnnounced { chain: b.shared_chain(), tip: BlockHash::ZERO, from: 1 };
        let out = a.handle_input(input, &oracle, TieBreakRule::LastReward);
        assert!(matches!(&out[..], [NodeOutput::Ignore(IgnoreReason::Invalid(_))]));
    }

    #[test]
    fn redelivery_is_idempotent() {
        let oracle = grid();
        let mut a = node(0, &oracle);
        let mut b = node(1, &oracle);
        mine(&mut b, &oracle, 4);
        let msg = announce(&b);
        a.handle_input(msg.clone(), &oracle, TieBreakRule::SumReward);
        let snapshot = (a.chain().clone(), a.agent.replay.len(), a.stats.adoptions);
        let out = a.handle_input(msg, &oracle, TieBreakRule::SumReward);
        assert!(matches!(&out[..], [NodeOutput::Ignore(IgnoreReason::AlreadyCurrent)]));
        assert_eq!((a.chain().clone(), a.agent.replay.len(), a.stats.adoptions), snapshot);
    }
}
