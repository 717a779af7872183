//! Blocks, canonical serialization, hash linkage and chain validation.
//!
//! A block at height `k + 1` stores the environment state reached by the
//! transition it records, the action that caused it, the reward returned by
//! the oracle, an opaque transaction payload and the digest of the block at
//! height `k`. Digests are SHA-256 over [`canonical_bytes`].
//!
//! Canonical layout (little-endian throughout):
//!
//! ```text
//! height u64 | state_len u32 | state f64 * state_len | action u32 | reward f64
//! | payload_len u32 | payload | prev_hash [u8; 32] | author u32
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environment::{EnvError, Oracle, StepResult};

/// Upper bound on payload size, in bytes.
pub const MAX_PAYLOAD_LEN: usize = 1 << 20;

/// Environment state vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvState(pub Vec<f64>);

impl EnvState {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, so `-0.0 != 0.0` and NaN payloads are compared exactly.
    pub fn bit_eq(&self, other: &EnvState) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for EnvState {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Index into an oracle's action set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub u32);

impl ActionId {
    /// Sentinel carried only by the genesis block.
    pub const NONE: ActionId = ActionId(u32::MAX);

    pub fn is_none(self) -> bool {
        self == Self::NONE
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_none() {
            f.write_str("-")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

pub type Reward = f64;

/// Transaction data carried by a block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload(Vec<u8>);

impl Payload {
    pub fn new(bytes: Vec<u8>) -> Result<Self, BlockError> {
        if bytes.len() > MAX_PAYLOAD_LEN {
            return Err(BlockError::PayloadTooLarge(bytes.len()));
        }
        Ok(Self(bytes))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Mutable access to the raw bytes. Used by tamper experiments.
    pub fn bytes_mut(&mut self) -> &mut Vec<u8> {
        &mut self.0
    }
}

/// SHA-256 digest of a block's canonical bytes.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockHash(pub [u8; 32]);

impl BlockHash {
    pub const ZERO: BlockHash = BlockHash([0; 32]);

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockHash({})", self.to_hex())
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub height: u64,
    /// State reached by this block's transition.
    pub state: EnvState,
    /// Action that produced `state`.
    pub action: ActionId,
    pub reward: Reward,
    pub payload: Payload,
    /// Digest of the block at `height - 1`.
    pub prev_hash: BlockHash,
    pub author: u32,
}

impl Block {
    pub fn genesis(initial_state: EnvState) -> Self {
        Self {
            height: 0,
            state: initial_state,
            action: ActionId::NONE,
            reward: 0.0,
            payload: Payload::empty(),
            prev_hash: BlockHash::ZERO,
            author: 0,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.height == 0
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_bytes(self)
    }

    pub fn hash(&self) -> BlockHash {
        hash_block(self)
    }

    /// Decodes one canonical record. Values are taken bit-for-bit; no
    /// finiteness checks are applied here so that corrupted records still
    /// decode and can be rejected by validation with a precise height.
    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Block, DecodeError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let height = r.u64()?;
        let state_len = r.u32()? as usize;
        if state_len > r.remaining() / 8 {
            return Err(DecodeError::Truncated { needed: state_len * 8, at: r.pos });
        }
        let mut state = Vec::with_capacity(state_len);
        for _ in 0..state_len {
            state.push(r.f64()?);
        }
        let action = ActionId(r.u32()?);
        let reward = r.f64()?;
        let payload_len = r.u32()? as usize;
        if payload_len > MAX_PAYLOAD_LEN {
            return Err(DecodeError::PayloadTooLarge(payload_len));
        }
        let payload = r.take(payload_len)?.to_vec();
        let prev_hash = BlockHash(r.take(32)?.try_into().expect("32-byte slice"));
        let author = r.u32()?;
        if r.remaining() != 0 {
            return Err(DecodeError::TrailingBytes(r.remaining()));
        }
        Ok(Block {
            height,
            state: EnvState(state),
            action,
            reward,
            payload: Payload(payload),
            prev_hash,
            author,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated { needed: n, at: self.pos });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD_LEN}-byte limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("record truncated: needed {needed} bytes at offset {at}")]
    Truncated { needed: usize, at: usize },
    #[error("{0} trailing bytes after block record")]
    TrailingBytes(usize),
    #[error("payload length {0} exceeds limit")]
    PayloadTooLarge(usize),
}

pub fn canonical_bytes(block: &Block) -> Vec<u8> {
    let state = block.state.values();
    let payload = block.payload.as_bytes();
    let mut out = Vec::with_capacity(64 + 8 * state.len() + payload.len());
    out.extend_from_slice(&block.height.to_le_bytes());
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for v in state {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&block.action.0.to_le_bytes());
    out.extend_from_slice(&block.reward.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&block.prev_hash.0);
    out.extend_from_slice(&block.author.to_le_bytes());
    out
}

pub fn hash_bytes(bytes: &[u8]) -> BlockHash {
    BlockHash(Sha256::digest(bytes).into())
}

pub fn hash_block(block: &Block) -> BlockHash {
    hash_bytes(&canonical_bytes(block))
}

/// Why a block cannot extend a chain.
#[derive(Clone, Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("expected height {expected}, found {found}")]
    HeightMismatch { expected: u64, found: u64 },
    #[error("prev_hash {found} does not match predecessor digest {expected}")]
    HashMismatch { expected: BlockHash, found: BlockHash },
    #[error("transition rejected by oracle: {0}")]
    TransitionInvalid(String),
    #[error("genesis block does not match the oracle's genesis: {0}")]
    BadGenesis(String),
    #[error("chain is empty")]
    Empty,
    #[error("malformed block record: {0}")]
    Malformed(String),
}

/// First failure found by [`validate_chain`].
#[derive(Clone, Debug, Error, PartialEq)]
#[error("invalid block at height {height}: {error}")]
pub struct ValidationFailure {
    pub height: u64,
    pub error: ChainError,
}

/// Ordered blocks starting at genesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new(oracle: &dyn Oracle) -> Self {
        Self {
            blocks: vec![Block::genesis(oracle.spec().initial_state.clone())],
        }
    }

    /// Wraps blocks without checking them. Call [`validate_chain`] before
    /// trusting the result.
    pub fn from_blocks_unchecked(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn into_blocks(self) -> Vec<Block> {
        self.blocks
    }

    /// Mutable access for tamper experiments; the result is generally invalid.
    pub fn blocks_mut(&mut self) -> &mut Vec<Block> {
        &mut self.blocks
    }

    /// Number of blocks including genesis.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    /// Digest of the tip block. Peers exchange this alongside a chain since
    /// nothing inside the chain commits to the tip's own content.
    pub fn tip_digest(&self) -> BlockHash {
        self.tip().hash()
    }

    pub fn get(&self, height: u64) -> Option<&Block> {
        self.blocks.get(usize::try_from(height).ok()?)
    }

    /// Sum of recorded rewards over all blocks, accumulated from genesis.
    pub fn reward_sum(&self) -> f64 {
        self.blocks.iter().map(|b| b.reward).sum()
    }

    /// Prefix holding heights `0..=height`.
    pub fn prefix(&self, height: u64) -> Chain {
        let end = (height as usize + 1).min(self.blocks.len());
        Chain { blocks: self.blocks[..end].to_vec() }
    }

    /// Highest height at which both chains hold the same block.
    pub fn common_ancestor_height(&self, other: &Chain) -> Option<u64> {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .take_while(|(a, b)| a == b)
            .last()
            .map(|(a, _)| a.height)
    }

    pub fn contains_hash_at(&self, height: u64, digest: &BlockHash) -> bool {
        self.get(height).is_some_and(|b| b.hash() == *digest)
    }

    /// Appends `block` after checking height, linkage and the oracle transition.
    pub fn append(&mut self, block: Block, oracle: &dyn Oracle) -> Result<(), ChainError> {
        check_successor(self.tip(), &block, oracle)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Compares the announced tip digest with the chain's actual tip.
    pub fn check_tip_digest(&self, announced: &BlockHash) -> Result<(), ValidationFailure> {
        let actual = self.tip_digest();
        if actual == *announced {
            Ok(())
        } else {
            Err(ValidationFailure {
                height: self.height(),
                error: ChainError::HashMismatch { expected: *announced, found: actual },
            })
        }
    }
}

/// Value-returning form of [`Chain::append`].
pub fn append_block(chain: &Chain, block: Block, oracle: &dyn Oracle) -> Result<Chain, ChainError> {
    let mut next = chain.clone();
    next.append(block, oracle)?;
    Ok(next)
}

fn check_successor(tip: &Block, block: &Block, oracle: &dyn Oracle) -> Result<(), ChainError> {
    if block.height != tip.height + 1 {
        return Err(ChainError::HeightMismatch { expected: tip.height + 1, found: block.height });
    }
    let expected = tip.hash();
    if block.prev_hash != expected {
        return Err(ChainError::HashMismatch { expected, found: block.prev_hash });
    }
    check_transition(tip, block, oracle)
}

fn check_transition(parent: &Block, block: &Block, oracle: &dyn Oracle) -> Result<(), ChainError> {
    let origin = oracle.origin_state(parent);
    let claimed = StepResult {
        next_state: block.state.clone(),
        reward: block.reward,
        terminal: oracle.is_terminal(&block.state),
    };
    match oracle.verify_transition(&origin, block.action, &claimed) {
        Ok(true) => Ok(()),
        Ok(false) => Err(ChainError::TransitionInvalid(format!(
            "action {} from {:?} does not yield state {:?} with reward {}",
            block.action,
            origin.values(),
            block.state.values(),
            block.reward
        ))),
        Err(e) => Err(ChainError::TransitionInvalid(e.to_string())),
    }
}

fn check_genesis(genesis: &Block, oracle: &dyn Oracle) -> Result<(), ChainError> {
    let bad = |msg: &str| Err(ChainError::BadGenesis(msg.to_owned()));
    if genesis.height != 0 {
        return Err(ChainError::HeightMismatch { expected: 0, found: genesis.height });
    }
    if !genesis.action.is_none() {
        return bad("action is not the sentinel");
    }
    if genesis.reward.to_bits() != 0f64.to_bits() {
        return bad("reward is not zero");
    }
    if genesis.prev_hash != BlockHash::ZERO {
        return bad("prev_hash is not zero");
    }
    if !genesis.state.bit_eq(&oracle.spec().initial_state) {
        return bad("state differs from the oracle's initial state");
    }
    Ok(())
}

/// Validates a whole chain.
///
/// Hash linkage is checked over the full chain before any oracle
/// transition, so tampering with block `k` is reported at `k + 1` where the
/// successor's stored digest stops matching. Within each pass the lowest
/// failing height wins. The tip's own content is not covered by linkage;
/// use [`Chain::check_tip_digest`] against an announced digest for that.
pub fn validate_chain(chain: &Chain, oracle: &dyn Oracle) -> Result<(), ValidationFailure> {
    let blocks = chain.blocks();
    let Some(genesis) = blocks.first() else {
        return Err(ValidationFailure { height: 0, error: ChainError::Empty });
    };
    let fail = |height: u64, error: ChainError| Err(ValidationFailure { height, error });

    let mut prev_digest = genesis.hash();
    for (k, block) in blocks.iter().enumerate().skip(1) {
        let k = k as u64;
        if block.prev_hash != prev_digest {
            return fail(k, ChainError::HashMismatch { expected: prev_digest, found: block.prev_hash });
        }
        if block.height != k {
            return fail(k, ChainError::HeightMismatch { expected: k, found: block.height });
        }
        prev_digest = block.hash();
    }

    if let Err(e) = check_genesis(genesis, oracle) {
        return fail(0, e);
    }
    for pair in blocks.windows(2) {
        if let Err(e) = check_transition(&pair[0], &pair[1], oracle) {
            return fail(pair[1].height, e);
        }
    }
    Ok(())
}

/// [`validate_chain`] plus a comparison of the tip against an announced digest.
pub fn validate_announced(
    chain: &Chain,
    announced_tip: &BlockHash,
    oracle: &dyn Oracle,
) -> Result<(), ValidationFailure> {
    validate_chain(chain, oracle)?;
    chain.check_tip_digest(announced_tip)
}

impl From<EnvError> for ChainError {
    fn from(e: EnvError) -> Self {
        ChainError::TransitionInvalid(e.to_string())
    }
}
