//! Experiment runner behind the `pourl` binary.
//!
//! An experiment is one TOML file: a scenario name, an output directory and
//! the `[sim]`, `[learning]`, `[gridworld]` and `[attack]` tables. Unknown
//! keys are rejected and everything is validated before anything runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use pourl_core::consensus::ledger_csv;
use pourl_core::dump::{to_json_lines, RawDump};
use pourl_core::environment::GridWorld;
use pourl_core::netsim::{AttackConfig, AttackReport, SimError};
use pourl_core::{
    compute_awards, run_attack_scenario, run_simulation, GridWorldConfig, LearningConfig, SimConfig, SimReport,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or unreadable configuration; exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Missing, truncated or undecodable chain dump; exit code 2.
    #[error("unreadable: {0}")]
    Unreadable(String),
    /// Failure while running; exit code 1.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Unreadable(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One node mining alone.
    Mine,
    /// Several nodes without partitions.
    Converge,
    /// At least one partition that heals during the run.
    Partition,
    /// Honest chain against colluding attackers that rewrite a payload.
    Attack,
    /// Long single- or multi-node run for the reward curve.
    Learncurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: Scenario,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub learning: LearningConfig,
    #[serde(default)]
    pub gridworld: GridWorldConfig,
    #[serde(default)]
    pub attack: AttackConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.sim.validate()?;
        self.learning.validate().map_err(|e| CliError::Config(e.to_string()))?;
        GridWorld::new(self.gridworld.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        match self.scenario {
            Scenario::Mine if self.sim.node_count != 1 => {
                Err(CliError::Config("scenario mine runs exactly one node".into()))
            }
            Scenario::Converge if !self.sim.partitions.is_empty() => {
                Err(CliError::Config("scenario converge takes no partitions".into()))
            }
            Scenario::Partition if self.sim.partitions.is_empty() => {
                Err(CliError::Config("scenario partition needs at least one partition".into()))
            }
            _ => Ok(()),
        }
    }

    /// Replaces both the network and the learning seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.learning.seed = seed;
    }
}

pub enum Outcome {
    Simulation(SimReport),
    Attack(AttackReport),
}

/// Runs the configured scenario and writes its outputs under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let oracle = GridWorld::new(cfg.gridworld.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    info!("running {:?} into {}", cfg.scenario, out.display());
    let io = |e: std::io::Error| CliError::Runtime(format!("writing {}: {e}", out.display()));
    match cfg.scenario {
        Scenario::Attack => {
            let report = run_attack_scenario(&cfg.sim, &cfg.attack, &oracle, &cfg.learning)?;
            report.write_outputs(out, &oracle)?;
            Ok(Outcome::Attack(report))
        }
        _ => {
            let report = run_simulation(cfg.sim.clone(), &oracle, &cfg.learning)?;
            report.write_outputs(out, &oracle)?;
            std::fs::write(out.join("ledger.csv"), ledger_csv(&compute_awards(report.consented_chain()))).map_err(io)?;
            Ok(Outcome::Simulation(report))
        }
    }
}

/// One-paragraph human summary of a finished run.
pub fn describe(outcome: &Outcome, out: &Path) -> String {
    let mut s = String::new();
    match outcome {
        Outcome::Simulation(r) => {
            let chain = r.consented_chain();
            let _ = writeln!(s, "nodes: {}", r.config.node_count);
            let _ = writeln!(s, "height: {}", chain.height());
            let _ = writeln!(s, "tip: {}", chain.tip_digest().to_hex());
            let _ = writeln!(s, "converged: {}", r.converged());
            let _ = writeln!(s, "forks: {}", r.nodes.iter().map(|n| n.forks).sum::<u64>());
            for p in &r.partitions {
                if let Some(t) = p.convergence_time() {
                    let _ = writeln!(s, "convergence after heal at {}: {t:.4}", p.end);
                }
            }
            if let Some((first, last)) = r.window_averages() {
                let _ = writeln!(s, "reward avg first/last window: {first:.4} / {last:.4}");
            }
        }
        Outcome::Attack(r) => {
            let _ = writeln!(s, "trials: {}", r.trials.len());
            let _ = writeln!(s, "honest survival (last reward): {}", r.honest_survival_last_reward);
            let _ = writeln!(s, "honest survival (reward sum): {}", r.honest_survival_sum_reward);
        }
    }
    let _ = write!(s, "outputs: {}", out.display());
    s
}

/// Result of checking a dump.
#[derive(Debug, PartialEq)]
pub enum Verdict {
    Valid { blocks: usize, tip: String },
    Invalid { height: u64, cause: String },
}

fn read_dump(path: &Path) -> Result<RawDump, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Unreadable(format!("{}: {e}", path.display())))?;
    RawDump::parse(&bytes).map_err(|e| CliError::Unreadable(format!("{}: {e}", path.display())))
}

/// Loads a dump, rebuilds its oracle from the header and validates it.
/// Unreadable files are [`CliError::Unreadable`].
pub fn verify_file(path: &Path) -> Result<Verdict, CliError> {
    let raw = read_dump(path)?;
    let descriptor = raw
        .header
        .as_ref()
        .ok_or_else(|| CliError::Unreadable(format!("{}: no oracle header", path.display())))?;
    let oracle = descriptor.build().map_err(|e| CliError::Unreadable(e.to_string()))?;
    Ok(match raw.verify(oracle.as_ref()) {
        Ok(chain) => Verdict::Valid { blocks: chain.len(), tip: chain.tip_digest().to_hex() },
        Err(f) => Verdict::Invalid { height: f.height, cause: f.error.to_string() },
    })
}

/// Per-block summary lines, or JSON lines with `json`.
pub fn inspect_file(path: &Path, json: bool) -> Result<String, CliError> {
    let raw = read_dump(path)?;
    let chain = raw
        .decode_chain()
        .map_err(|f| CliError::Unreadable(format!("{}: block {} does not decode: {}", path.display(), f.height, f.error)))?;
    if json {
        return Ok(to_json_lines(&chain));
    }
    let mut s = String::new();
    for b in chain.blocks() {
        let action = if b.action.is_none() { "-".to_string() } else { b.action.0.to_string() };
        let _ = writeln!(
            s,
            "{:>6}  author {:>3}  action {:>2}  reward {:>8}  {}",
            b.height,
            b.author,
            action,
            b.reward,
            b.hash().to_hex()
        );
    }
    Ok(s)
}
