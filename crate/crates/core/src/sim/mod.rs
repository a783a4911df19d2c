//! Deterministic discrete-event simulation of `n` processes.

pub mod adversary;
mod engine;
pub mod network;
pub mod trace;

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adversary::{ByzantineStrategy, ScriptedAction, TargetPolicy};
pub use engine::run;
pub use network::{DelayPolicy, NetworkModel, NetworkPolicy};
pub use trace::{Trace, TraceEvent, TraceHeader, TraceRecord};

use crate::types::{CertKind, ConfigError, MessageKind, ProcessId, ProtocolConfig, RelaySlot, Round, Time};

/// Hard ceiling on processed events when the scenario sets none.
pub const DEFAULT_MAX_EVENTS: u64 = 50_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    pub process: ProcessId,
    pub strategy: ByzantineStrategy,
}

/// Starting state of one process; unlisted processes start in round 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub process: ProcessId,
    pub curr: Round,
    /// Defaults to `curr`.
    #[serde(default)]
    pub next: Option<Round>,
    #[serde(default = "yes")]
    pub finalized: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum InFlightPayload {
    /// The sender's own share.
    Share { kind: MessageKind, slot: RelaySlot },
    /// A certificate over `signers`, assumed collected before the run.
    Certificate {
        kind: CertKind,
        slot: RelaySlot,
        signers: Vec<ProcessId>,
    },
}

/// A payload already travelling when the run starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InFlight {
    pub from: ProcessId,
    pub to: ProcessId,
    pub deliver_at: Time,
    pub payload: InFlightPayload,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCondition {
    #[serde(default)]
    pub max_time: Option<Time>,
    /// Stop once this many synchronization times have been confirmed.
    #[serde(default)]
    pub max_syncs: Option<u32>,
    #[serde(default)]
    pub max_events: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub network: NetworkPolicy,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSpec>,
    #[serde(default)]
    pub initial: Vec<InitialState>,
    #[serde(default)]
    pub in_flight: Vec<InFlight>,
    #[serde(default)]
    pub stop: StopCondition,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl Scenario {
    /// All processes correct, uniform delays, no stop bound yet.
    pub fn new(protocol: ProtocolConfig) -> Self {
        Scenario {
            protocol,
            network: NetworkPolicy::default(),
            byzantine: Vec::new(),
            initial: Vec::new(),
            in_flight: Vec::new(),
            stop: StopCondition::default(),
        }
    }

    pub fn until(mut self, t: Time) -> Self {
        self.stop.max_time = Some(t);
        self
    }

    pub fn stop_after_syncs(mut self, k: u32) -> Self {
        self.stop.max_syncs = Some(k);
        self
    }

    pub fn with_byzantine(mut self, process: ProcessId, strategy: ByzantineStrategy) -> Self {
        self.byzantine.push(ByzantineSpec { process, strategy });
        self
    }

    pub fn with_network(mut self, network: NetworkPolicy) -> Self {
        self.network = network;
        self
    }

    pub fn corrupt(&self) -> BTreeSet<ProcessId> {
        self.byzantine.iter().map(|b| b.process).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let cfg = &self.protocol;
        cfg.validate()?;
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let corrupt = self.corrupt();
        if corrupt.len() != self.byzantine.len() {
            return bad("a process is listed as Byzantine twice".into());
        }
        if corrupt.len() > cfg.f as usize {
            return bad(format!(
                "{} Byzantine processes exceed f={}",
                corrupt.len(),
                cfg.f
            ));
        }
        if let Some(p) = corrupt.iter().find(|p| !cfg.contains(**p)) {
            return bad(format!("Byzantine process {p} is outside [0, {})", cfg.n));
        }
        let mut seen = BTreeSet::new();
        for init in &self.initial {
            if !cfg.contains(init.process) || !seen.insert(init.process) {
                return bad(format!("bad or repeated initial state for {}", init.process));
            }
            if init.next.is_some_and(|next| next < init.curr) {
                return bad(format!("initial state of {} has next < curr", init.process));
            }
        }
        for m in &self.in_flight {
            if !cfg.contains(m.from) || !cfg.contains(m.to) {
                return bad(format!(
                    "in-flight payload {} -> {} names an unknown process",
                    m.from, m.to
                ));
            }
            if m.deliver_at == 0 {
                return bad("in-flight payloads must arrive after time 0".into());
            }
            let slot = match &m.payload {
                InFlightPayload::Share { slot, .. } | InFlightPayload::Certificate { slot, .. } => *slot,
            };
            if !cfg.slot_in_range(slot) {
                return bad(format!("in-flight slot {slot} is out of range"));
            }
        }
        if self.stop.max_time.is_none() && self.stop.max_syncs.is_none() {
            return bad("stop condition needs max_time or max_syncs".into());
        }
        Ok(())
    }
}

/// A scenario drawn at random for fuzzing: a random corruption set of size
/// at most `f` with random strategies, and a random pre-GST prefix (GST and
/// delay policies) that drives processes into a random reachable state
/// before the network stabilizes. Everyone starts together in a random
/// round. The time bound allows roughly `rounds` post-GST rounds.
pub fn random_scenario(n: u32, f: u32, seed: u64, rounds: u64) -> Scenario {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let delta = rng.random_range(2..=20);
    let cap_delta = rng.random_range(0..=10 * delta);
    let gst = rng.random_range(0..=100 * delta);
    let protocol = ProtocolConfig::new(n, f, delta, cap_delta)
        .with_seed(rng.random())
        .with_gst(gst);
    let mut sc = Scenario::new(protocol);
    let policies = [DelayPolicy::Max, DelayPolicy::Min, DelayPolicy::Uniform];
    sc.network = NetworkPolicy {
        pre_gst: policies[rng.random_range(0..3)],
        post_gst: policies[rng.random_range(0..3)],
    };
    let byz = rng.random_range(0..=f) as usize;
    for i in sample(&mut rng, n as usize, byz) {
        let strategy = ByzantineStrategy::random(&mut rng);
        sc.byzantine.push(ByzantineSpec {
            process: ProcessId(i as u32),
            strategy,
        });
    }
    sc.byzantine.sort_by_key(|b| b.process);
    let start = Round(rng.random_range(0..4));
    if start > Round::ZERO {
        sc.initial = (0..n)
            .map(|p| InitialState {
                process: ProcessId(p),
                curr: start,
                next: None,
                finalized: true,
            })
            .collect();
    }
    let per_round = sc.protocol.c1() + cap_delta + (2 * f as u64 + 8) * delta;
    sc.until(gst + delta + rounds * per_round)
}
