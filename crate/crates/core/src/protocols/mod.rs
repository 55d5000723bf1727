//! Toy PBFT and Raft, their message codecs, and the test cases written
//! against them.

pub mod cases;
pub mod pbft;
pub mod raft;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::MessageCodec;
use crate::driver::{InProcess, ReplicaBackend, TestCase};
use crate::dsl::DslRegistry;
use crate::history::History;
use crate::model::{check_exclusivity, run_synchronous, ExclusivityReport};
use crate::replay::{check_replay, Gate, ReplayError, ReplayReport};
use crate::trace::ExecutionTrace;

pub use pbft::{Pbft, PbftCodec, PbftMessage};
pub use raft::{Raft, RaftCodec, RaftMessage};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Pbft,
    Raft,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::Pbft => "pbft",
            ProtocolKind::Raft => "raft",
        })
    }
}

impl FromStr for ProtocolKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pbft" => Ok(ProtocolKind::Pbft),
            "raft" => Ok(ProtocolKind::Raft),
            other => Err(ConfigError(format!("unknown protocol `{other}`"))),
        }
    }
}

/// A configured protocol instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Protocol {
    Pbft(Pbft),
    Raft(Raft),
}

impl Protocol {
    /// PBFT with `n` replicas (default 4) tolerating `(n - 1) / 3` faults and
    /// one request, or Raft with `n` replicas (default 5).
    pub fn new(kind: ProtocolKind, n: Option<usize>) -> Result<Self, ConfigError> {
        Ok(match kind {
            ProtocolKind::Pbft => {
                let n = n.unwrap_or(4);
                Protocol::Pbft(Pbft::new(n, n.saturating_sub(1) / 3, vec!["alpha".into()])?)
            }
            ProtocolKind::Raft => Protocol::Raft(Raft::new(n.unwrap_or(5))?),
        })
    }

    pub fn kind(&self) -> ProtocolKind {
        match self {
            Protocol::Pbft(_) => ProtocolKind::Pbft,
            Protocol::Raft(_) => ProtocolKind::Raft,
        }
    }

    pub fn replica_count(&self) -> usize {
        match self {
            Protocol::Pbft(p) => p.n,
            Protocol::Raft(r) => r.n,
        }
    }

    pub fn backend(&self) -> Box<dyn ReplicaBackend> {
        match self {
            Protocol::Pbft(p) => Box::new(InProcess::new(p.clone())),
            Protocol::Raft(r) => Box::new(InProcess::new(r.clone())),
        }
    }

    pub fn codec(&self) -> Box<dyn MessageCodec> {
        match self {
            Protocol::Pbft(_) => Box::new(PbftCodec),
            Protocol::Raft(_) => Box::new(RaftCodec),
        }
    }

    /// The fault-free execution: every message delivered in rounds.
    pub fn normal_run(&self, budget: usize) -> ExecutionTrace {
        match self {
            Protocol::Pbft(p) => run_synchronous(p.clone(), budget),
            Protocol::Raft(r) => run_synchronous(r.clone(), budget),
        }
    }

    pub fn check_replay(
        &self,
        h: &History,
        trials: usize,
        seed: u64,
        gate: Gate,
    ) -> Result<ReplayReport, ReplayError> {
        match self {
            Protocol::Pbft(p) => check_replay(p, h, trials, seed, gate),
            Protocol::Raft(r) => check_replay(r, h, trials, seed, gate),
        }
    }

    pub fn check_exclusivity(&self, max_configs: usize) -> ExclusivityReport {
        match self {
            Protocol::Pbft(p) => check_exclusivity(p.clone(), max_configs),
            Protocol::Raft(r) => check_exclusivity(r.clone(), max_configs),
        }
    }

    pub fn testcases(&self) -> Vec<TestCase> {
        match self {
            Protocol::Pbft(p) => cases::pbft_cases(p),
            Protocol::Raft(r) => cases::raft_cases(r),
        }
    }

    pub fn testcase(&self, name: &str) -> Option<TestCase> {
        self.testcases().into_iter().find(|t| t.name == name)
    }

    /// Protocol-specific names accepted by the filter parser.
    pub fn registry(&self) -> DslRegistry {
        match self {
            Protocol::Pbft(p) => cases::pbft_registry(p),
            Protocol::Raft(r) => cases::raft_registry(r),
        }
    }
}
