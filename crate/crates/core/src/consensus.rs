//! Fork choice and the award ledger.
//!
//! The longer chain always wins. Between chains of equal length the
//! configured tie-break compares either the tip rewards or the reward sums;
//! if those are equal too, the chain whose tip digest is lexicographically
//! smaller wins. The outcome is always one of the two inputs.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::Oracle;
use crate::hashchain::{validate_chain, Chain, ValidationFailure};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreakRule {
    /// Higher reward at the tip block wins.
    #[default]
    LastReward,
    /// Higher sum of rewards over all blocks wins.
    SumReward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Choice {
    Local,
    Candidate,
}

/// Why the winner won.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Longer,
    Reward,
    Digest,
    /// Both chains are the same.
    Identical,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("candidate chain rejected: {0}")]
    InvalidCandidate(ValidationFailure),
}

/// Orders two chains; `Greater` means `a` is preferred.
pub fn compare_chains(a: &Chain, b: &Chain, rule: TieBreakRule) -> (Ordering, Decision) {
    match a.len().cmp(&b.len()) {
        Ordering::Equal => {}
        ord => return (ord, Decision::Longer),
    }
    let by_reward = match rule {
        TieBreakRule::LastReward => a.tip().reward.total_cmp(&b.tip().reward),
        TieBreakRule::SumReward => a.reward_sum().total_cmp(&b.reward_sum()),
    };
    if by_reward != Ordering::Equal {
        return (by_reward, Decision::Reward);
    }
    // smaller digest is preferred
    match b.tip_digest().cmp(&a.tip_digest()) {
        Ordering::Equal => (Ordering::Equal, Decision::Identical),
        ord => (ord, Decision::Digest),
    }
}

/// Picks between the local chain and a validated candidate. The local
/// chain is trusted; the candidate is re-validated against the oracle.
pub fn fork_choice<'a>(
    local: &'a Chain,
    candidate: &'a Chain,
    rule: TieBreakRule,
    oracle: &dyn Oracle,
) -> Result<(Choice, Decision), ConsensusError> {
    validate_chain(candidate, oracle).map_err(ConsensusError::InvalidCandidate)?;
    Ok(choose_validated(local, candidate, rule))
}

/// [`fork_choice`] for chains that are already known to be valid.
pub fn choose_validated(local: &Chain, candidate: &Chain, rule: TieBreakRule) -> (Choice, Decision) {
    let (ord, why) = compare_chains(local, candidate, rule);
    let choice = if ord == Ordering::Less { Choice::Candidate } else { Choice::Local };
    (choice, why)
}

/// Returns the preferred chain of the two.
pub fn preferred<'a>(a: &'a Chain, b: &'a Chain, rule: TieBreakRule) -> &'a Chain {
    match choose_validated(a, b, rule).0 {
        Choice::Local => a,
        Choice::Candidate => b,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub node_id: u32,
    pub award: f64,
}

/// Credits each non-genesis block's author with that block's reward,
/// summed per author in chain order. Sorted by node id.
pub fn compute_awards(chain: &Chain) -> Vec<LedgerEntry> {
    let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
    for b in chain.blocks().iter().skip(1) {
        *totals.entry(b.author).or_insert(0.0) += b.reward;
    }
    totals.into_iter().map(|(node_id, award)| LedgerEntry { node_id, award }).collect()
}

/// `node_id,award` CSV with header.
pub fn ledger_csv(entries: &[LedgerEntry]) -> String {
    let mut out = String::from("node_id,award\n");
    for e in entries {
        out.push_str(&format!("{},{}\n", e.node_id, e.award));
    }
    out
}
