//! Shared domain types: identifiers, configuration, protocol messages and
//! relay certificates, plus their structural validation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{AggregateToken, SignatureShare, ThresholdScheme};

/// Abstract simulation time, in integer time units.
pub type Time = u64;

/// Rounds are capped at 2^63; entering a round beyond that panics.
pub const MAX_ROUND: u64 = 1 << 63;

/// Index of a process in `[0, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u32);

impl ProcessId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A round (view) number. Round 0 is the initial round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Round(pub u64);

impl Round {
    pub const ZERO: Round = Round(0);

    /// # Panics
    ///
    /// Panics when the successor would exceed [`MAX_ROUND`].
    pub fn next(self) -> Round {
        assert!(self.0 < MAX_ROUND, "round counter overflow past 2^63");
        Round(self.0 + 1)
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The `k`-th relay position of a round, `1 <= k <= f+1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelaySlot {
    pub round: Round,
    pub k: u32,
}

impl RelaySlot {
    pub fn new(round: impl Into<Round>, k: u32) -> Self {
        RelaySlot {
            round: round.into(),
            k,
        }
    }
}

impl From<u64> for Round {
    fn from(v: u64) -> Self {
        Round(v)
    }
}

impl fmt::Display for RelaySlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.round, self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryMode {
    /// Corruption set fixed without knowledge of the relay randomness.
    Oblivious,
    /// Corruption set may be chosen after inspecting the relay schedule.
    StrongStatic,
}

/// Global protocol parameters shared by every module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n: u32,
    pub f: u32,
    /// Post-GST delivery bound.
    pub delta: Time,
    /// Desired round duration.
    pub cap_delta: Time,
    pub gst: Time,
    /// Shared randomness from which the relay function is derived.
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub adversary_mode: AdversaryMode,
    /// Pacemaker stabilization constant; defaults to `4 * delta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<Time>,
}

fn default_mode() -> AdversaryMode {
    AdversaryMode::Oblivious
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("fault bound violated: the fault model requires 3f < n (f < n/3), got n={n}, f={f}")]
    FaultBound { n: u32, f: u32 },
    #[error("delta must be positive")]
    ZeroDelta,
    #[error("c1 must be at least 1 time unit")]
    ZeroC1,
}

impl ProtocolConfig {
    pub fn new(n: u32, f: u32, delta: Time, cap_delta: Time) -> Self {
        ProtocolConfig {
            n,
            f,
            delta,
            cap_delta,
            gst: 0,
            seed: 0,
            adversary_mode: AdversaryMode::Oblivious,
            c1: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_gst(mut self, gst: Time) -> Self {
        self.gst = gst;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if 3 * u64::from(self.f) >= u64::from(self.n) {
            return Err(ConfigError::FaultBound { n: self.n, f: self.f });
        }
        if self.delta == 0 {
            return Err(ConfigError::ZeroDelta);
        }
        if self.c1 == Some(0) {
            return Err(ConfigError::ZeroC1);
        }
        Ok(())
    }

    pub fn c1(&self) -> Time {
        self.c1.unwrap_or(4 * self.delta)
    }

    /// Number of relays per round.
    pub fn relays_per_round(&self) -> u32 {
        self.f + 1
    }

    pub fn processes(&self) -> impl Iterator<Item = ProcessId> {
        (0..self.n).map(ProcessId)
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        p.0 < self.n
    }

    pub fn slot_in_range(&self, slot: RelaySlot) -> bool {
        (1..=self.f + 1).contains(&slot.k)
    }
}

/// Process-to-relay message types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    PreCommit,
    Commit,
    Finalize,
}

impl MessageKind {
    pub fn certificate(self) -> CertKind {
        match self {
            MessageKind::PreCommit => CertKind::Tc,
            MessageKind::Commit => CertKind::Qc,
            MessageKind::Finalize => CertKind::FinalizeAck,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            MessageKind::PreCommit => 1,
            MessageKind::Commit => 2,
            MessageKind::Finalize => 3,
        }
    }
}

/// Relay-issued aggregate certificate types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertKind {
    Tc,
    Qc,
    FinalizeAck,
}

impl CertKind {
    pub fn share_kind(self) -> MessageKind {
        match self {
            CertKind::Tc => MessageKind::PreCommit,
            CertKind::Qc => MessageKind::Commit,
            CertKind::FinalizeAck => MessageKind::Finalize,
        }
    }

    /// f+1 for TC, 2f+1 for QC and finalize-ack.
    pub fn threshold(self, f: u32) -> usize {
        match self {
            CertKind::Tc => f as usize + 1,
            CertKind::Qc | CertKind::FinalizeAck => 2 * f as usize + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub slot: RelaySlot,
    pub sender: ProcessId,
    pub share: SignatureShare,
}

/// A threshold certificate. `signers` is kept sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertKind,
    pub slot: RelaySlot,
    pub signers: Vec<ProcessId>,
    pub token: AggregateToken,
}

impl Certificate {
    pub fn round(&self) -> Round {
        self.slot.round
    }
}

/// Either half of the protocol's traffic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Message(Message),
    Certificate(Certificate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Invalid {
    #[error("relay index outside [1, f+1]")]
    BadSlot,
    #[error("process id outside [0, n)")]
    BadSender,
    #[error("signature share does not match the message tuple")]
    BadShare,
    #[error("fewer signers than the certificate threshold")]
    InsufficientSigners,
    #[error("signer list is not strictly increasing or names an unknown process")]
    BadSigners,
    #[error("aggregate token does not verify")]
    BadToken,
}

/// Structural and cryptographic validity of a process-to-relay message.
pub fn validate_message(msg: &Message, cfg: &ProtocolConfig) -> Result<(), Invalid> {
    if !cfg.slot_in_range(msg.slot) {
        return Err(Invalid::BadSlot);
    }
    if !cfg.contains(msg.sender) {
        return Err(Invalid::BadSender);
    }
    let scheme = ThresholdScheme::new(cfg);
    if msg.share.signer != msg.sender || !scheme.share_verifies(&msg.share, msg.kind, msg.slot) {
        return Err(Invalid::BadShare);
    }
    Ok(())
}

/// Threshold, signer-set and token checks for a relay certificate.
pub fn validate_certificate(cert: &Certificate, cfg: &ProtocolConfig) -> Result<(), Invalid> {
    if !cfg.slot_in_range(cert.slot) {
        return Err(Invalid::BadSlot);
    }
    let sorted = cert.signers.windows(2).all(|w| w[0] < w[1]);
    if !sorted || cert.signers.iter().any(|p| !cfg.contains(*p)) {
        return Err(Invalid::BadSigners);
    }
    if cert.signers.len() < cert.kind.threshold(cfg.f) {
        return Err(Invalid::InsufficientSigners);
    }
    if !ThresholdScheme::new(cfg).token_verifies(cert) {
        return Err(Invalid::BadToken);
    }
    Ok(())
}
