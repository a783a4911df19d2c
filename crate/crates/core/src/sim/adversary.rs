//! Byzantine strategies.
//!
//! A corrupt process may do anything its possession ledger allows: sign its
//! own shares (and, when colluding, those of every other corrupt process),
//! aggregate shares it holds, and pick who receives what. It can never
//! aggregate a share it was not sent.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{AggregateError, PossessionLedger, SignatureShare, ThresholdScheme};
use crate::synchronizer::Effect;
use crate::types::{CertKind, MessageKind, ProcessId, RelaySlot, Time};

/// Recipient choice for one certificate kind.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "targets")]
pub enum TargetPolicy {
    #[default]
    All,
    Nobody,
    Only {
        processes: Vec<ProcessId>,
    },
    /// Each process independently with probability 1/2.
    RandomSubset,
}

impl TargetPolicy {
    pub fn resolve<R: Rng + ?Sized>(&self, n: u32, rng: &mut R) -> Vec<ProcessId> {
        match self {
            TargetPolicy::All => (0..n).map(ProcessId).collect(),
            TargetPolicy::Nobody => Vec::new(),
            TargetPolicy::Only { processes } => {
                let mut v: Vec<ProcessId> = processes.iter().copied().filter(|p| p.0 < n).collect();
                v.sort();
                v.dedup();
                v
            }
            TargetPolicy::RandomSubset => (0..n).map(ProcessId).filter(|_| rng.random_bool(0.5)).collect(),
        }
    }
}

/// One step of a scripted adversary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum ScriptedAction {
    /// Send this process's own share for `(kind, slot)` to each of `to`.
    SendShare {
        at: Time,
        kind: MessageKind,
        slot: RelaySlot,
        to: Vec<ProcessId>,
    },
    /// Aggregate the shares of `signers` (default: every held share) and
    /// send the certificate to each of `to`.
    Certify {
        at: Time,
        kind: CertKind,
        slot: RelaySlot,
        #[serde(default)]
        signers: Option<Vec<ProcessId>>,
        to: Vec<ProcessId>,
    },
}

impl ScriptedAction {
    pub fn at(&self) -> Time {
        match self {
            ScriptedAction::SendShare { at, .. } | ScriptedAction::Certify { at, .. } => *at,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ByzantineStrategy {
    /// Never sends anything.
    Crash,
    /// Drops every share sent to it as a relay. With `participate` it still
    /// runs the participant side of the protocol honestly.
    SilentRelay {
        #[serde(default)]
        participate: bool,
    },
    /// Aggregates like a correct relay but chooses recipients per
    /// certificate kind. With `collude` it adds the shares of the whole
    /// corrupt coalition.
    SelectiveBroadcast {
        #[serde(default)]
        tc: TargetPolicy,
        #[serde(default)]
        qc: TargetPolicy,
        #[serde(default)]
        finalize_ack: TargetPolicy,
        #[serde(default)]
        collude: bool,
        #[serde(default)]
        participate: bool,
    },
    Scripted {
        actions: Vec<ScriptedAction>,
        #[serde(default)]
        participate: bool,
    },
}

impl ByzantineStrategy {
    pub fn participates(&self) -> bool {
        match self {
            ByzantineStrategy::Crash => false,
            ByzantineStrategy::SilentRelay { participate }
            | ByzantineStrategy::SelectiveBroadcast { participate, .. }
            | ByzantineStrategy::Scripted { participate, .. } => *participate,
        }
    }

    /// A strategy drawn at random, for fuzzing.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let policies = [
            TargetPolicy::All,
            TargetPolicy::Nobody,
            TargetPolicy::RandomSubset,
        ];
        let pick = |rng: &mut R| policies.choose(rng).cloned().unwrap_or_default();
        match rng.random_range(0..3) {
            0 => ByzantineStrategy::Crash,
            1 => ByzantineStrategy::SilentRelay {
                participate: rng.random_bool(0.5),
            },
            _ => ByzantineStrategy::SelectiveBroadcast {
                tc: pick(rng),
                qc: pick(rng),
                finalize_ack: pick(rng),
                collude: rng.random_bool(0.5),
                participate: rng.random_bool(0.5),
            },
        }
    }

    pub fn targets(&self, kind: CertKind) -> Option<&TargetPolicy> {
        match self {
            ByzantineStrategy::SelectiveBroadcast {
                tc, qc, finalize_ack, ..
            } => Some(match kind {
                CertKind::Tc => tc,
                CertKind::Qc => qc,
                CertKind::FinalizeAck => finalize_ack,
            }),
            _ => None,
        }
    }
}

/// Every share for `(kind, slot)` that `holder` possesses, by signer order.
pub fn held_shares(
    scheme: &ThresholdScheme,
    ledger: &PossessionLedger,
    holder: ProcessId,
    n: u32,
    kind: MessageKind,
    slot: RelaySlot,
) -> Vec<SignatureShare> {
    (0..n)
        .map(|s| scheme.share(ProcessId(s), kind, slot))
        .filter(|share| ledger.possesses(holder, share))
        .collect()
}

/// Aggregates everything `relay` holds for the certificate and addresses it
/// to `targets` only.
#[allow(clippy::too_many_arguments)]
pub fn selective_broadcast(
    scheme: &ThresholdScheme,
    ledger: &PossessionLedger,
    relay: ProcessId,
    n: u32,
    f: u32,
    kind: CertKind,
    slot: RelaySlot,
    targets: Vec<ProcessId>,
) -> Result<Effect, AggregateError> {
    let shares = held_shares(scheme, ledger, relay, n, kind.share_kind(), slot);
    let cert = scheme.aggregate(kind, slot, &shares, kind.threshold(f), ledger, relay)?;
    Ok(Effect::Multicast { to: targets, cert })
}
