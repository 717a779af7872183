//! Seeded discrete-event simulation of a mining network.
//!
//! Every node mines with an exponentially distributed duration (its mean
//! stands in for compute power). A finished block is appended locally and
//! the whole chain is announced to every peer; each announcement is delayed
//! exponentially, may be dropped, and is lost if a partition separates the
//! two nodes when it arrives. When a partition heals every node announces
//! its current chain once. Receivers validate, run fork choice, and
//! restart mining when their tip changes.
//!
//! The loop is single-threaded. Events are ordered by timestamp and then by
//! insertion sequence, and all randomness comes from seeded ChaCha
//! generators, so a run is a pure function of its configuration.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{compute_awards, fork_choice, preferred, Choice, LedgerEntry, TieBreakRule};
use crate::dqn::{AgentState, DqnError, LearningConfig};
use crate::dump::encode_dump;
use crate::environment::{greedy_path_len, Oracle};
use crate::hashchain::{validate_chain, BlockHash, Chain, Payload};
use crate::node::{NodeHandle, NodeInput, NodeOutput};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Agent(#[from] DqnError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("writing outputs: {0}")]
    Io(#[from] std::io::Error),
}

/// A value given once for all nodes or once per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerNode {
    pub fn get(&self, node: usize) -> f64 {
        match self {
            PerNode::Uniform(v) => *v,
            PerNode::Each(v) => v[node % v.len()],
        }
    }
}

/// Nodes listed in `side` cannot exchange messages with the rest while
/// `start <= t < end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub start: f64,
    pub end: f64,
    pub side: Vec<u32>,
}

impl PartitionSpec {
    fn active(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }

    fn separates(&self, a: u32, b: u32) -> bool {
        self.side.contains(&a) != self.side.contains(&b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub node_count: usize,
    pub seed: u64,
    /// Mean mining duration in simulated seconds.
    pub mean_mine_time: PerNode,
    pub mean_link_delay: f64,
    pub drop_probability: f64,
    pub partitions: Vec<PartitionSpec>,
    /// The run stops once any node's chain reaches this height.
    pub max_blocks: u64,
    pub tie_break: TieBreakRule,
    /// Window for the moving-average reward series.
    pub moving_average_window: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            node_count: 1,
            seed: 42,
            mean_mine_time: PerNode::Uniform(1.0),
            mean_link_delay: 0.05,
            drop_probability: 0.0,
            partitions: Vec::new(),
            max_blocks: 50,
            tie_break: TieBreakRule::LastReward,
            moving_average_window: 200,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.node_count == 0 {
            return bad("node_count must be positive".into());
        }
        let means: Vec<f64> = match &self.mean_mine_time {
            PerNode::Uniform(v) => vec![*v],
            PerNode::Each(v) if v.len() == self.node_count => v.clone(),
            PerNode::Each(v) => {
                return bad(format!("mean_mine_time lists {} values for {} nodes", v.len(), self.node_count))
            }
        };
        if !means.iter().all(|m| m.is_finite() && *m > 0.0) {
            return bad("mean_mine_time must be positive".into());
        }
        if !(self.mean_link_delay.is_finite() && self.mean_link_delay > 0.0) {
            return bad("mean_link_delay must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_probability) {
            return bad("drop_probability must lie in [0, 1)".into());
        }
        if self.max_blocks == 0 {
            return bad("max_blocks must be positive".into());
        }
        if self.moving_average_window == 0 {
            return bad("moving_average_window must be positive".into());
        }
        let mut sorted: Vec<&PartitionSpec> = self.partitions.iter().collect();
        sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
        for p in &sorted {
            if !(p.start.is_finite() && p.end.is_finite() && p.start >= 0.0 && p.start < p.end) {
                return bad(format!("partition [{}, {}) is not a valid interval", p.start, p.end));
            }
            if let Some(n) = p.side.iter().find(|n| **n as usize >= self.node_count) {
                return bad(format!("partition names unknown node {n}"));
            }
        }
        if sorted.windows(2).any(|w| w[1].start < w[0].end) {
            return bad("partition intervals overlap".into());
        }
        Ok(())
    }

    fn separated(&self, a: u32, b: u32, t: f64) -> bool {
        self.partitions.iter().any(|p| p.active(t) && p.separates(a, b))
    }
}

/// Per-node learning seed. Node 0 uses the configured seed unchanged.
pub fn node_seed(base: u64, node: u32) -> u64 {
    base.wrapping_add(u64::from(node).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug)]
enum EventKind {
    MineComplete { node: u32, job: u64 },
    Deliver { from: u32, to: u32, chain: Arc<Chain>, tip: BlockHash },
    PartitionStart,
    PartitionEnd(usize),
}

#[derive(Clone, Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEvent {
    Mined,
    Adopted,
    PartitionStart,
    PartitionEnd,
}

impl LogEvent {
    fn as_str(self) -> &'static str {
        match self {
            LogEvent::Mined => "mined",
            LogEvent::Adopted => "adopted",
            LogEvent::PartitionStart => "partition_start",
            LogEvent::PartitionEnd => "partition_end",
        }
    }
}

/// One row of `metrics.csv`. Partition rows use node `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub time: f64,
    pub node: Option<u32>,
    pub event: LogEvent,
    pub height: u64,
    pub tip_reward: f64,
    pub reorg_depth: u64,
    pub forks: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MessageStats {
    pub sent: u64,
    pub dropped: u64,
    pub partitioned: u64,
    pub delivered: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SideTip {
    pub height: u64,
    pub tip: String,
}

/// What happened around one partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionRecord {
    pub start: f64,
    pub end: f64,
    /// Best chain on the listed side and on the rest, when the partition ended.
    pub side_tips: Option<[SideTip; 2]>,
    /// Fork-choice winner of the two side tips.
    pub winner: Option<SideTip>,
    /// Simulated time at which all nodes first shared one tip after the end.
    pub converged_at: Option<f64>,
    #[serde(skip)]
    winner_chain: Option<Arc<Chain>>,
    #[serde(skip)]
    side_chains: Option<[Arc<Chain>; 2]>,
}

impl PartitionRecord {
    pub fn convergence_time(&self) -> Option<f64> {
        self.converged_at.map(|t| t - self.end)
    }

    pub fn winner_chain(&self) -> Option<&Chain> {
        self.winner_chain.as_deref()
    }

    /// Best chain on the listed side and on the rest, when the partition ended.
    pub fn side_chains(&self) -> Option<(&Chain, &Chain)> {
        self.side_chains.as_ref().map(|[a, b]| (a.as_ref(), b.as_ref()))
    }

    pub fn sides_diverged(&self) -> bool {
        self.side_tips.as_ref().is_some_and(|[a, b]| a.tip != b.tip)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeReport {
    pub id: u32,
    pub height: u64,
    pub tip: String,
    pub mined: u64,
    pub adoptions: u64,
    pub forks: u64,
    pub reorg_depths: BTreeMap<u64, u64>,
    pub gradient_steps: u64,
    pub replay_len: usize,
    /// Terminal blocks on the node's final chain.
    pub episodes: u64,
    /// Height of the first terminal block on the final chain.
    pub first_goal_height: Option<u64>,
    /// Start-to-terminal steps under the node's greedy policy.
    pub greedy_path_len: Option<usize>,
}

pub struct SimReport {
    pub config: SimConfig,
    pub log: Vec<LogRecord>,
    pub nodes: Vec<NodeReport>,
    pub chains: Vec<Arc<Chain>>,
    pub agents: Vec<AgentState>,
    pub messages: MessageStats,
    pub partitions: Vec<PartitionRecord>,
    pub stop_time: f64,
}

/// Scalars written to `report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct ReportSummary {
    pub seed: u64,
    pub node_count: usize,
    pub max_blocks: u64,
    pub tie_break: TieBreakRule,
    pub stop_time: f64,
    pub converged: bool,
    pub final_tip: Option<String>,
    pub final_height: u64,
    pub total_forks: u64,
    pub reorg_depths: BTreeMap<u64, u64>,
    pub messages: MessageStats,
    pub partitions: Vec<PartitionRecord>,
    pub convergence_time_after_heal: Option<f64>,
    pub first_window_avg_reward: Option<f64>,
    pub last_window_avg_reward: Option<f64>,
    pub episodes: u64,
    pub first_goal_height: Option<u64>,
    pub greedy_path_len: Option<usize>,
    pub ledger: Vec<LedgerEntry>,
    pub nodes: Vec<NodeReport>,
}

impl SimReport {
    pub fn converged(&self) -> bool {
        self.chains.windows(2).all(|w| w[0].tip_digest() == w[1].tip_digest())
    }

    /// The chain the network settled on: the fork-choice winner over all
    /// final node chains.
    pub fn consented_chain(&self) -> &Chain {
        self.chains
            .iter()
            .map(|c| c.as_ref())
            .reduce(|a, b| preferred(a, b, self.config.tie_break))
            .expect("at least one node")
    }

    pub fn consented_node(&self) -> usize {
        let best = self.consented_chain().tip_digest();
        self.chains.iter().position(|c| c.tip_digest() == best).unwrap_or(0)
    }

    /// Rewards of the consented chain, genesis excluded.
    pub fn rewards(&self) -> Vec<f64> {
        self.consented_chain().blocks().iter().skip(1).map(|b| b.reward).collect()
    }

    pub fn moving_average(&self) -> Vec<f64> {
        moving_average(&self.rewards(), self.config.moving_average_window)
    }

    /// Mean reward over the first and last windows of the consented chain.
    pub fn window_averages(&self) -> Option<(f64, f64)> {
        let r = self.rewards();
        let w = self.config.moving_average_window;
        if r.len() < w {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&r[..w]), mean(&r[r.len() - w..])))
    }

    pub fn summary(&self) -> ReportSummary {
        let consented = self.consented_chain();
        let converged = self.converged();
        let mut reorg_depths = BTreeMap::new();
        for n in &self.nodes {
            for (d, c) in &n.reorg_depths {
                *reorg_depths.entry(*d).or_insert(0) += c;
            }
        }
        let winner = &self.nodes[self.consented_node()];
        let windows = self.window_averages();
        ReportSummary {
            seed: self.config.seed,
            node_count: self.config.node_count,
            max_blocks: self.config.max_blocks,
            tie_break: self.config.tie_break,
            stop_time: self.stop_time,
            converged,
            final_tip: converged.then(|| consented.tip_digest().to_hex()),
            final_height: consented.height(),
            total_forks: self.nodes.iter().map(|n| n.forks).sum(),
            reorg_depths,
            messages: self.messages.clone(),
            partitions: self.partitions.clone(),
            convergence_time_after_heal: self.partitions.iter().filter_map(PartitionRecord::convergence_time).last(),
            first_window_avg_reward: windows.map(|w| w.0),
            last_window_avg_reward: windows.map(|w| w.1),
            episodes: winner.episodes,
            first_goal_height: winner.first_goal_height,
            greedy_path_len: winner.greedy_path_len,
            ledger: compute_awards(consented),
            nodes: self.nodes.clone(),
        }
    }

    /// Timestamped event series.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("time,node,event,height,tip_reward,reorg_depth,forks\n");
        for r in &self.log {
            let node = r.node.map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.time,
                node,
                r.event.as_str(),
                r.height,
                r.tip_reward,
                r.reorg_depth,
                r.forks
            );
        }
        out
    }

    /// Per-block reward and moving average of each node's final chain.
    pub fn rewards_csv(&self) -> String {
        let mut out = String::from("node,height,reward,moving_average\n");
        for (id, chain) in self.chains.iter().enumerate() {
            let rewards: Vec<f64> = chain.blocks().iter().skip(1).map(|b| b.reward).collect();
            let avg = moving_average(&rewards, self.config.moving_average_window);
            for (i, (r, a)) in rewards.iter().zip(avg).enumerate() {
                let _ = writeln!(out, "{},{},{},{}", id, i + 1, r, a);
            }
        }
        out
    }

    /// Writes `metrics.csv`, `rewards.csv`, `report.json` and
    /// `chains/node_<id>.chain` under `dir`.
    pub fn write_outputs(&self, dir: &Path, oracle: &dyn Oracle) -> Result<(), SimError> {
        std::fs::create_dir_all(dir.join("chains"))?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        std::fs::write(dir.join("rewards.csv"), self.rewards_csv())?;
        let json = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        std::fs::write(dir.join("report.json"), json + "\n")?;
        let descriptor = oracle.descriptor();
        for (id, chain) in self.chains.iter().enumerate() {
            std::fs::write(
                dir.join("chains").join(format!("node_{id}.chain")),
                encode_dump(chain, Some(&descriptor)),
            )?;
        }
        Ok(())
    }
}

/// Trailing mean over at most `window` values ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub struct Simulation<'o> {
    config: SimConfig,
    oracle: &'o dyn Oracle,
    nodes: Vec<NodeHandle>,
    queue: BinaryHeap<Event>,
    seq: u64,
    next_job: u64,
    now: f64,
    rng: ChaCha8Rng,
    link_delay: Exp<f64>,
    log: Vec<LogRecord>,
    messages: MessageStats,
    partitions: Vec<PartitionRecord>,
    flushing: bool,
    check_invariants: bool,
}

impl<'o> Simulation<'o> {
    pub fn new(config: SimConfig, oracle: &'o dyn Oracle, learning: &LearningConfig) -> Result<Self, SimError> {
        config.validate()?;
        learning.validate()?;
        let nodes = (0..config.node_count as u32)
            .map(|id| {
                let cfg = LearningConfig { seed: node_seed(learning.seed, id), ..learning.clone() };
                Ok(NodeHandle::new(id, AgentState::new(cfg, oracle)?, oracle))
            })
            .collect::<Result<Vec<_>, SimError>>()?;
        Ok(Self::from_nodes(config, oracle, nodes))
    }

    /// Starts from prepared nodes, e.g. ones that already hold a chain.
    pub fn from_nodes(config: SimConfig, oracle: &'o dyn Oracle, nodes: Vec<NodeHandle>) -> Self {
        let partitions = config
            .partitions
            .iter()
            .map(|p| PartitionRecord {
                start: p.start,
                end: p.end,
                side_tips: None,
                winner: None,
                converged_at: None,
                winner_chain: None,
                side_chains: None,
            })
            .collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            link_delay: Exp::new(1.0 / config.mean_link_delay).expect("validated delay"),
            config,
            oracle,
            nodes,
            queue: BinaryHeap::new(),
            seq: 0,
            next_job: 0,
            now: 0.0,
            log: Vec::new(),
            messages: MessageStats::default(),
            partitions,
            flushing: false,
            check_invariants: false,
        }
    }

    /// Re-validates every node's chain after every event.
    pub fn with_invariant_checks(mut self, on: bool) -> Self {
        self.check_invariants = on;
        self
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event { time, seq: self.seq, kind });
    }

    pub fn run(mut self) -> Result<SimReport, SimError> {
        for (i, p) in self.config.partitions.clone().iter().enumerate() {
            self.push(p.start, EventKind::PartitionStart);
            self.push(p.end, EventKind::PartitionEnd(i));
        }
        for id in 0..self.nodes.len() {
            let out = self.nodes[id].handle_input(NodeInput::StartMining, self.oracle, self.config.tie_break);
            self.apply_outputs(id as u32, out);
        }

        while let Some(ev) = self.queue.pop() {
            self.now = ev.time;
            let stop = self.process(ev.kind)?;
            self.after_event()?;
            if stop {
                break;
            }
        }
        // deliver what is still in flight; no new mining
        self.flushing = true;
        while let Some(ev) = self.queue.pop() {
            self.now = ev.time;
            if !matches!(ev.kind, EventKind::MineComplete { .. }) {
                self.process(ev.kind)?;
                self.after_event()?;
            }
        }
        Ok(self.collect_metrics())
    }

    /// Returns true when the stop condition is reached.
    fn process(&mut self, kind: EventKind) -> Result<bool, SimError> {
        match kind {
            EventKind::MineComplete { node, job } => self.on_mine_complete(node, job),
            EventKind::Deliver { from, to, chain, tip } => {
                if self.config.separated(from, to, self.now) {
                    self.messages.partitioned += 1;
                    return Ok(false);
                }
                self.messages.delivered += 1;
                let n = &mut self.nodes[to as usize];
                let before = n.stats.adoptions;
                let forks_before = n.stats.reorg_depths.values().sum::<u64>();
                let old_height = n.chain().height();
                let old_common = n.chain().common_ancestor_height(&chain);
                let out = n.handle_input(NodeInput::ChainAnnounced { chain, tip, from }, self.oracle, self.config.tie_break);
                if n.stats.adoptions > before {
                    let reorg_depth = if n.stats.reorg_depths.values().sum::<u64>() > forks_before {
                        old_height - old_common.unwrap_or(0)
                    } else {
                        0
                    };
                    self.log_node(to, LogEvent::Adopted, reorg_depth);
                }
                self.apply_outputs(to, out);
                Ok(false)
            }
            EventKind::PartitionStart => {
                self.log_marker(LogEvent::PartitionStart);
                Ok(false)
            }
            EventKind::PartitionEnd(i) => {
                self.on_partition_end(i);
                self.log_marker(LogEvent::PartitionEnd);
                // reconnecting peers exchange their current chains
                for id in 0..self.nodes.len() as u32 {
                    let n = &self.nodes[id as usize];
                    let announce = NodeOutput::Announce { chain: n.shared_chain(), tip: n.chain().tip_digest() };
                    self.apply_outputs(id, vec![announce]);
                }
                Ok(false)
            }
        }
    }

    fn on_mine_complete(&mut self, node: u32, job: u64) -> Result<bool, SimError> {
        let n = &mut self.nodes[node as usize];
        if n.pending.as_ref().map(|j| j.job_id) != Some(job) {
            // aborted: the tip changed after this job was scheduled
            return Ok(false);
        }
        n.pending = None;
        let tip = n.chain().tip().clone();
        let payload = Payload::new(format!("node {} job {} height {}", node, job, tip.height + 1).into_bytes())
            .expect("short payload");
        let block = n.agent.mine_one_block(self.oracle, &tip, payload, node)?;
        let out = n.handle_input(NodeInput::MiningFinished(block), self.oracle, self.config.tie_break);
        let height = n.chain().height();
        self.log_node(node, LogEvent::Mined, 0);
        self.apply_outputs(node, out);
        Ok(height >= self.config.max_blocks)
    }

    fn on_partition_end(&mut self, index: usize) {
        let spec = &self.config.partitions[index];
        let rule = self.config.tie_break;
        let best = |inside: bool| {
            self.nodes
                .iter()
                .filter(|n| spec.side.contains(&n.id) == inside)
                .map(|n| n.shared_chain())
                .reduce(|a, b| if preferred(&a, &b, rule) == a.as_ref() { a } else { b })
        };
        let (Some(a), Some(b)) = (best(true), best(false)) else {
            return;
        };
        let tip = |c: &Chain| SideTip { height: c.height(), tip: c.tip_digest().to_hex() };
        let winner = if preferred(&a, &b, rule) == a.as_ref() { a.clone() } else { b.clone() };
        let rec = &mut self.partitions[index];
        rec.side_tips = Some([tip(&a), tip(&b)]);
        rec.winner = Some(tip(&winner));
        rec.winner_chain = Some(winner);
        rec.side_chains = Some([a, b]);
    }

    fn apply_outputs(&mut self, node: u32, outputs: Vec<NodeOutput>) {
        for out in outputs {
            match out {
                NodeOutput::Announce { chain, tip } => {
                    for peer in 0..self.nodes.len() as u32 {
                        if peer == node {
                            continue;
                        }
                        self.messages.sent += 1;
                        if self.rng.random::<f64>() < self.config.drop_probability {
                            self.messages.dropped += 1;
                            continue;
                        }
                        let at = self.now + self.link_delay.sample(&mut self.rng);
                        self.push(at, EventKind::Deliver { from: node, to: peer, chain: Arc::clone(&chain), tip });
                    }
                }
                NodeOutput::RequestMining(tip) => {
                    if self.flushing {
                        self.nodes[node as usize].pending = None;
                        continue;
                    }
                    let mean = self.config.mean_mine_time.get(node as usize);
                    let dist = Exp::new(1.0 / mean).expect("validated mine time");
                    let finish = self.now + dist.sample(&mut self.rng);
                    self.next_job += 1;
                    let job = self.next_job;
                    self.nodes[node as usize].pending =
                        Some(crate::node::MiningJob { job_id: job, tip: tip.hash(), finish_time: finish });
                    self.push(finish, EventKind::MineComplete { node, job });
                }
                NodeOutput::Ignore(_) => {}
            }
        }
    }

    fn after_event(&mut self) -> Result<(), SimError> {
        if self.partitions.iter().any(|p| p.end <= self.now && p.converged_at.is_none()) && self.all_same_tip() {
            let now = self.now;
            for p in self.partitions.iter_mut().filter(|p| p.end <= now && p.converged_at.is_none()) {
                p.converged_at = Some(now);
            }
        }
        if self.check_invariants {
            for n in &self.nodes {
                validate_chain(n.chain(), self.oracle)
                    .map_err(|e| SimError::Invariant(format!("node {} holds an invalid chain: {e}", n.id)))?;
                if let Some(job) = &n.pending {
                    if job.tip != n.chain().tip_digest() {
                        return Err(SimError::Invariant(format!("node {} mines on a stale tip", n.id)));
                    }
                }
            }
        }
        Ok(())
    }

    fn all_same_tip(&self) -> bool {
        let first = self.nodes[0].chain().tip_digest();
        self.nodes[1..].iter().all(|n| n.chain().tip_digest() == first)
    }

    fn log_node(&mut self, node: u32, event: LogEvent, reorg_depth: u64) {
        let n = &self.nodes[node as usize];
        self.log.push(LogRecord {
            time: self.now,
            node: Some(node),
            event,
            height: n.chain().height(),
            tip_reward: n.chain().tip().reward,
            reorg_depth,
            forks: n.stats.forks,
        });
    }

    fn log_marker(&mut self, event: LogEvent) {
        self.log.push(LogRecord { time: self.now, node: None, event, height: 0, tip_reward: 0.0, reorg_depth: 0, forks: 0 });
    }

    pub fn collect_metrics(self) -> SimReport {
        let oracle = self.oracle;
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let chain = n.chain();
                let terminal: Vec<u64> = chain
                    .blocks()
                    .iter()
                    .skip(1)
                    .filter(|b| oracle.is_terminal(&b.state))
                    .map(|b| b.height)
                    .collect();
                let greedy = greedy_path_len(oracle, |s| n.agent.greedy_action(s).expect("state dim matches"), 100);
                NodeReport {
                    id: n.id,
                    height: chain.height(),
                    tip: chain.tip_digest().to_hex(),
                    mined: n.stats.mined,
                    adoptions: n.stats.adoptions,
                    forks: n.stats.forks,
                    reorg_depths: n.stats.reorg_depths.clone(),
                    gradient_steps: n.agent.gradient_steps,
                    replay_len: n.agent.replay.len(),
                    episodes: terminal.len() as u64,
                    first_goal_height: terminal.first().copied(),
                    greedy_path_len: greedy,
                }
            })
            .collect();
        SimReport {
            config: self.config,
            log: self.log,
            nodes,
            chains: self.nodes.iter().map(NodeHandle::shared_chain).collect(),
            agents: self.nodes.into_iter().map(|n| n.agent).collect(),
            messages: self.messages,
            partitions: self.partitions,
            stop_time: self.now,
        }
    }
}

pub fn run_simulation(config: SimConfig, oracle: &dyn Oracle, learning: &LearningConfig) -> Result<SimReport, SimError> {
    Simulation::new(config, oracle, learning)?.run()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackRace {
    /// Attackers remine up to exactly the honest height.
    #[default]
    EqualLength,
    /// Attackers stop one block short of the honest height.
    Shorter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub honest_count: usize,
    pub attacker_count: usize,
    /// First height the attackers rewrite.
    pub tamper_height: u64,
    pub trials: u64,
    pub race: AttackRace,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { honest_count: 4, attacker_count: 6, tamper_height: 10, trials: 100, race: AttackRace::EqualLength }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackTrial {
    pub seed: u64,
    pub honest_height: u64,
    pub attacker_height: u64,
    pub honest_tip_reward: f64,
    pub attacker_tip_reward: f64,
    pub honest_reward_sum: f64,
    pub attacker_reward_sum: f64,
    pub survived_last_reward: bool,
    pub survived_sum_reward: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackReport {
    pub attack: AttackConfig,
    pub honest_survival_last_reward: f64,
    pub honest_survival_sum_reward: f64,
    pub trials: Vec<AttackTrial>,
    #[serde(skip)]
    pub first_trial_chains: Option<(Chain, Chain)>,
}

impl AttackReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "seed,honest_height,attacker_height,honest_tip_reward,attacker_tip_reward,honest_reward_sum,attacker_reward_sum,survived_last_reward,survived_sum_reward\n",
        );
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                t.seed,
                t.honest_height,
                t.attacker_height,
                t.honest_tip_reward,
                t.attacker_tip_reward,
                t.honest_reward_sum,
                t.attacker_reward_sum,
                t.survived_last_reward,
                t.survived_sum_reward
            );
        }
        out
    }

    /// Writes `metrics.csv`, `report.json` and the first trial's honest and
    /// attacker chains under `dir`.
    pub fn write_outputs(&self, dir: &Path, oracle: &dyn Oracle) -> Result<(), SimError> {
        std::fs::create_dir_all(dir.join("chains"))?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(dir.join("report.json"), json + "\n")?;
        if let Some((honest, attacker)) = &self.first_trial_chains {
            let d = oracle.descriptor();
            std::fs::write(dir.join("chains/honest.chain"), encode_dump(honest, Some(&d)))?;
            std::fs::write(dir.join("chains/attacker.chain"), encode_dump(attacker, Some(&d)))?;
        }
        Ok(())
    }
}

/// Honest nodes build a chain; attackers then fork it at `tamper_height`
/// with an altered payload and remine forward with their own agents. The
/// honest side keeps its chain unless fork choice prefers the attackers'.
/// Attackers cannot forge oracle transitions, only payloads.
pub fn run_attack_scenario(
    config: &SimConfig,
    attack: &AttackConfig,
    oracle: &dyn Oracle,
    learning: &LearningConfig,
) -> Result<AttackReport, SimError> {
    if attack.honest_count == 0 || attack.attacker_count == 0 || attack.trials == 0 {
        return Err(SimError::ConfigInvalid("attack needs honest nodes, attackers and trials".into()));
    }
    let min_height = match attack.race {
        AttackRace::EqualLength => attack.tamper_height,
        AttackRace::Shorter => attack.tamper_height + 1,
    };
    if attack.tamper_height == 0 || config.max_blocks < min_height {
        return Err(SimError::ConfigInvalid(format!(
            "tamper_height {} must be at least 1 and leave room below max_blocks {}",
            attack.tamper_height, config.max_blocks
        )));
    }
    let mut trials = Vec::new();
    let mut first_trial_chains = None;
    for i in 0..attack.trials {
        let seed = config.seed.wrapping_add(i);
        let honest_cfg = SimConfig {
            node_count: attack.honest_count,
            seed,
            partitions: Vec::new(),
            mean_mine_time: PerNode::Uniform(config.mean_mine_time.get(0)),
            ..config.clone()
        };
        let honest_learning = LearningConfig { seed: learning.seed.wrapping_add(i), ..learning.clone() };
        let report = run_simulation(honest_cfg, oracle, &honest_learning)?;
        let honest = report.consented_chain().clone();

        let target = match attack.race {
            AttackRace::EqualLength => honest.height(),
            AttackRace::Shorter => honest.height() - 1,
        };
        let attacker = remine_fork(&honest, attack, target, seed, oracle, &honest_learning, config)?;
        let decide = |rule| -> Result<bool, SimError> {
            let (choice, _) = fork_choice(&honest, &attacker, rule, oracle)
                .map_err(|e| SimError::Invariant(format!("attackers produced an invalid chain: {e}")))?;
            Ok(choice == Choice::Local)
        };
        trials.push(AttackTrial {
            seed,
            honest_height: honest.height(),
            attacker_height: attacker.height(),
            honest_tip_reward: honest.tip().reward,
            attacker_tip_reward: attacker.tip().reward,
            honest_reward_sum: honest.reward_sum(),
            attacker_reward_sum: attacker.reward_sum(),
            survived_last_reward: decide(TieBreakRule::LastReward)?,
            survived_sum_reward: decide(TieBreakRule::SumReward)?,
        });
        if first_trial_chains.is_none() {
            first_trial_chains = Some((honest, attacker));
        }
    }
    let frac = |f: fn(&AttackTrial) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / trials.len() as f64;
    Ok(AttackReport {
        attack: attack.clone(),
        honest_survival_last_reward: frac(|t| t.survived_last_reward),
        honest_survival_sum_reward: frac(|t| t.survived_sum_reward),
        trials,
        first_trial_chains,
    })
}

/// Colluding attackers share one fork; each block goes to whichever
/// attacker's exponential mining clock fires first.
fn remine_fork(
    honest: &Chain,
    attack: &AttackConfig,
    target: u64,
    seed: u64,
    oracle: &dyn Oracle,
    learning: &LearningConfig,
    config: &SimConfig,
) -> Result<Chain, SimError> {
    let base = honest.prefix(attack.tamper_height - 1);
    let mut attackers = (0..attack.attacker_count)
        .map(|j| {
            let id = (attack.honest_count + j) as u32;
            let cfg = LearningConfig { seed: node_seed(learning.seed ^ 0xA77A_C4E5, id), ..learning.clone() };
            let mut agent = AgentState::new(cfg, oracle)?;
            agent.absorb_validated_chain(&base, oracle);
            Ok(agent)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut chain = base;
    while chain.height() < target {
        let winner = (0..attackers.len())
            .map(|j| {
                let mean = config.mean_mine_time.get(attack.honest_count + j);
                (j, Exp::new(1.0 / mean).expect("validated").sample(&mut rng))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(j, _)| j)
            .expect("at least one attacker");
        let height = chain.height() + 1;
        let payload = if height == attack.tamper_height {
            let mut bytes = honest.get(height).map(|b| b.payload.as_bytes().to_vec()).unwrap_or_default();
            bytes.extend_from_slice(b" [rewritten]");
            bytes
        } else {
            format!("attacker {} height {}", attack.honest_count + winner, height).into_bytes()
        };
        let author = (attack.honest_count + winner) as u32;
        let block = attackers[winner].mine_one_block(
            oracle,
            chain.tip(),
            Payload::new(payload).expect("short payload"),
            author,
        )?;
        chain
            .append(block, oracle)
            .map_err(|e| SimError::Invariant(format!("attacker block rejected: {e}")))?;
        for (j, a) in attackers.iter_mut().enumerate() {
            if j != winner {
                a.absorb_validated_chain(&chain, oracle);
            }
        }
    }
    Ok(chain)
}
