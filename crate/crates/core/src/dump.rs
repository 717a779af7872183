//! `.chain` dump files and JSON-lines export.
//!
//! A dump is a sequence of records, each a little-endian `u32` length
//! followed by that many bytes. Block records hold exactly
//! [`canonical_bytes`](crate::hashchain::canonical_bytes). An optional
//! leading header record starts with the magic `PCHN`, a `u32` version and
//! a JSON [`OracleDescriptor`], so a dump can be verified on its own.
//! A genesis record starts with eight zero bytes and can never be mistaken
//! for a header.

use serde::Serialize;
use thiserror::Error;

use crate::environment::{Oracle, OracleDescriptor};
use crate::hashchain::{hash_bytes, validate_chain, Block, BlockHash, Chain, ChainError, ValidationFailure};

pub const HEADER_MAGIC: &[u8; 4] = b"PCHN";
pub const HEADER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("dump is empty")]
    Empty,
    #[error("record {index} truncated: declared {declared} bytes, {available} available")]
    Truncated { index: usize, declared: usize, available: usize },
    #[error("unsupported header version {0}")]
    Version(u32),
    #[error("bad header: {0}")]
    Header(String),
    #[error("dump holds a header but no blocks")]
    NoBlocks,
}

/// Raw, framed view of a dump. Block records are kept as bytes so that
/// linkage can be checked even when a record no longer decodes.
#[derive(Clone, Debug)]
pub struct RawDump {
    pub header: Option<OracleDescriptor>,
    pub records: Vec<Vec<u8>>,
}

fn push_record(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn header_bytes(descriptor: &OracleDescriptor) -> Vec<u8> {
    let mut h = HEADER_MAGIC.to_vec();
    h.extend_from_slice(&HEADER_VERSION.to_le_bytes());
    h.extend_from_slice(&serde_json::to_vec(descriptor).expect("descriptor serializes"));
    h
}

pub fn encode_dump(chain: &Chain, header: Option<&OracleDescriptor>) -> Vec<u8> {
    let mut out = Vec::new();
    if let Some(d) = header {
        push_record(&mut out, &header_bytes(d));
    }
    for b in chain.blocks() {
        push_record(&mut out, &b.canonical_bytes());
    }
    out
}

impl RawDump {
    pub fn parse(bytes: &[u8]) -> Result<Self, DumpError> {
        if bytes.is_empty() {
            return Err(DumpError::Empty);
        }
        let mut records = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let index = records.len();
            let Some(len_bytes) = bytes.get(pos..pos + 4) else {
                return Err(DumpError::Truncated { index, declared: 4, available: bytes.len() - pos });
            };
            let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            pos += 4;
            let available = bytes.len() - pos;
            if len > available {
                return Err(DumpError::Truncated { index, declared: len, available });
            }
            records.push(bytes[pos..pos + len].to_vec());
            pos += len;
        }
        let header = match records.first() {
            Some(first) if first.starts_with(HEADER_MAGIC) => {
                let first = records.remove(0);
                Some(parse_header(&first)?)
            }
            _ => None,
        };
        if records.is_empty() {
            return Err(DumpError::NoBlocks);
        }
        Ok(Self { header, records })
    }

    /// Lowest height whose stored predecessor digest disagrees with the
    /// SHA-256 of the previous record.
    pub fn linkage_failure(&self) -> Option<ValidationFailure> {
        for k in 1..self.records.len() {
            let expected = hash_bytes(&self.records[k - 1]);
            let found = stored_prev_hash(&self.records[k]);
            if found != Some(expected) {
                return Some(ValidationFailure {
                    height: k as u64,
                    error: ChainError::HashMismatch { expected, found: found.unwrap_or_default() },
                });
            }
        }
        None
    }

    /// Decodes every record; the first malformed record is reported at its
    /// position in the dump.
    pub fn decode_chain(&self) -> Result<Chain, ValidationFailure> {
        self.records
            .iter()
            .enumerate()
            .map(|(k, r)| {
                Block::from_canonical_bytes(r).map_err(|e| ValidationFailure {
                    height: k as u64,
                    error: ChainError::Malformed(e.to_string()),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Chain::from_blocks_unchecked)
    }

    /// Full verification: raw linkage, decoding, then [`validate_chain`].
    pub fn verify(&self, oracle: &dyn Oracle) -> Result<Chain, ValidationFailure> {
        if let Some(f) = self.linkage_failure() {
            return Err(f);
        }
        let chain = self.decode_chain()?;
        validate_chain(&chain, oracle)?;
        Ok(chain)
    }
}

fn parse_header(record: &[u8]) -> Result<OracleDescriptor, DumpError> {
    let version = record
        .get(4..8)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DumpError::Header("truncated".into()))?;
    if version != HEADER_VERSION {
        return Err(DumpError::Version(version));
    }
    serde_json::from_slice(&record[8..]).map_err(|e| DumpError::Header(e.to_string()))
}

/// The `prev_hash` field sits 36 bytes from the end of a canonical record.
fn stored_prev_hash(record: &[u8]) -> Option<BlockHash> {
    let n = record.len();
    let bytes = record.get(n.checked_sub(36)?..n - 4)?;
    Some(BlockHash(bytes.try_into().ok()?))
}

#[derive(Serialize)]
struct JsonBlock<'a> {
    height: u64,
    author: u32,
    action: Option<u32>,
    reward: f64,
    state: &'a [f64],
    payload: String,
    prev_hash: String,
    hash: String,
}

/// One JSON object per block, hashes and payload hex-encoded.
pub fn to_json_lines(chain: &Chain) -> String {
    let mut out = String::new();
    for b in chain.blocks() {
        let row = JsonBlock {
            height: b.height,
            author: b.author,
            action: (!b.action.is_none()).then_some(b.action.0),
            reward: b.reward,
            state: b.state.values(),
            payload: hex::encode(b.payload.as_bytes()),
            prev_hash: b.prev_hash.to_hex(),
            hash: b.hash().to_hex(),
        };
        out.push_str(&serde_json::to_string(&row).expect("block serializes"));
        out.push('\n');
    }
    out
}
