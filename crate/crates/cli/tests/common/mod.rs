#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn pourl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pourl")).args(args).current_dir(cwd).output().expect("binary runs")
}

pub fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(format!("{name}.toml"))
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Runs an example config into `out` and returns the output.
pub fn run_example(name: &str, out: &Path, extra: &[&str]) -> Output {
    let config = example(name);
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    pourl(&args, out.parent().unwrap())
}

/// Byte range of every block record in a dump, found by walking the
/// length prefixes; a leading `PCHN` header record is skipped.
pub fn block_records(bytes: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        out.push((pos + 4, len));
        pos += 4 + len;
    }
    if bytes[4..].starts_with(b"PCHN") {
        out.remove(0);
    }
    out
}

/// Height at which a single-byte change at `offset` inside block record
/// `k` must be reported: the record's own predecessor digest breaks the
/// link into `k`, anything else breaks the link out of it. Genesis has no
/// link into it, so every genesis byte is reported at height 1.
pub fn expected_failure_height(k: usize, record_len: usize, offset: usize) -> u64 {
    let prev_hash = record_len - 36..record_len - 4;
    if k > 0 && prev_hash.contains(&offset) {
        k as u64
    } else {
        k as u64 + 1
    }
}

/// Parses the height out of `INVALID at height H: ...`.
pub fn reported_height(out: &Output) -> Option<u64> {
    let text = stdout(out);
    let rest = text.strip_prefix("INVALID at height ")?;
    rest.split(':').next()?.trim().parse().ok()
}
