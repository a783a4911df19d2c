//! Simulated k-of-n threshold signatures.
//!
//! Shares and aggregate tokens are keyed 128-bit SipHash digests. Hash
//! strength is not what keeps the adversary honest here: every aggregation
//! goes through [`ThresholdScheme::aggregate`], which refuses any share the
//! aggregating process does not hold in the [`PossessionLedger`]. A share of
//! a correct process only enters another process's ledger when a message
//! carrying it is delivered, so certificates over correct signers cannot be
//! fabricated.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::hash::Hasher;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use siphasher::sip128::{Hasher128, SipHasher13};
use thiserror::Error;

use crate::types::{CertKind, Certificate, MessageKind, ProcessId, ProtocolConfig, RelaySlot};

/// Opaque 128-bit digest, serialized as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub u128);

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:032x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16)
            .map(Digest)
            .map_err(serde::de::Error::custom)
    }
}

/// One process's signature over a `(kind, round, k)` tuple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignatureShare {
    pub signer: ProcessId,
    pub payload_digest: Digest,
}

/// Constant-size aggregate signature, independent of n.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregateToken {
    pub payload_digest: Digest,
    pub signers_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AggregateError {
    #[error("{have} distinct signers, need {need}")]
    BelowThreshold { have: usize, need: usize },
    #[error("share from {signer} does not bind the aggregated tuple")]
    MixedTuples { signer: ProcessId },
    #[error("{aggregator} does not possess the share of {signer}")]
    ForgeryAttempt {
        aggregator: ProcessId,
        signer: ProcessId,
    },
}

/// Shares each process has legitimately created or received.
#[derive(Clone, Debug, Default)]
pub struct PossessionLedger {
    held: HashMap<ProcessId, HashSet<SignatureShare>>,
}

impl PossessionLedger {
    pub fn record(&mut self, holder: ProcessId, share: SignatureShare) {
        self.held.entry(holder).or_default().insert(share);
    }

    pub fn possesses(&self, holder: ProcessId, share: &SignatureShare) -> bool {
        self.held.get(&holder).is_some_and(|set| set.contains(share))
    }

    pub fn holdings(&self, holder: ProcessId) -> usize {
        self.held.get(&holder).map_or(0, HashSet::len)
    }
}

const DOMAIN_SHARE: u8 = 0x51;
const DOMAIN_PAYLOAD: u8 = 0x52;
const DOMAIN_SIGNERS: u8 = 0x53;

/// Keyed signing and verification for one simulation.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdScheme {
    key: (u64, u64),
    n: u32,
    f: u32,
}

impl ThresholdScheme {
    pub fn new(cfg: &ProtocolConfig) -> Self {
        ThresholdScheme {
            key: (
                cfg.seed ^ 0x7468_7265_7368_6f6c,
                cfg.seed.rotate_left(29) ^ 0x6473_6967_6e61_7475,
            ),
            n: cfg.n,
            f: cfg.f,
        }
    }

    fn hasher(&self, domain: u8) -> SipHasher13 {
        let mut h = SipHasher13::new_with_keys(self.key.0, self.key.1);
        h.write_u8(domain);
        h
    }

    fn tuple_digest(&self, domain: u8, tag: u8, slot: RelaySlot, signer: Option<ProcessId>) -> Digest {
        let mut h = self.hasher(domain);
        h.write_u8(tag);
        h.write_u64(slot.round.0);
        h.write_u32(slot.k);
        if let Some(p) = signer {
            h.write_u32(p.0);
        }
        Digest(h.finish128().as_u128())
    }

    /// The share `signer` would produce for the tuple, without recording it.
    pub fn share(&self, signer: ProcessId, kind: MessageKind, slot: RelaySlot) -> SignatureShare {
        SignatureShare {
            signer,
            payload_digest: self.tuple_digest(DOMAIN_SHARE, kind.tag(), slot, Some(signer)),
        }
    }

    /// Signs and records the share in the signer's own ledger.
    pub fn sign_share(
        &self,
        ledger: &mut PossessionLedger,
        signer: ProcessId,
        kind: MessageKind,
        slot: RelaySlot,
    ) -> SignatureShare {
        let share = self.share(signer, kind, slot);
        ledger.record(signer, share.clone());
        share
    }

    pub fn share_verifies(&self, share: &SignatureShare, kind: MessageKind, slot: RelaySlot) -> bool {
        share.signer.0 < self.n && self.share(share.signer, kind, slot) == *share
    }

    fn token(&self, kind: CertKind, slot: RelaySlot, signers: &[ProcessId]) -> AggregateToken {
        let tag = kind.share_kind().tag();
        let mut h = self.hasher(DOMAIN_SIGNERS);
        h.write_u8(tag);
        h.write_u64(slot.round.0);
        h.write_u32(slot.k);
        h.write_usize(signers.len());
        for p in signers {
            h.write_u32(p.0);
        }
        AggregateToken {
            payload_digest: self.tuple_digest(DOMAIN_PAYLOAD, tag, slot, None),
            signers_digest: Digest(h.finish128().as_u128()),
        }
    }

    /// Combines shares held by `aggregator` into a certificate.
    ///
    /// The certificate's signer set is the sorted set of distinct share
    /// signers, so the result does not depend on share order.
    pub fn aggregate(
        &self,
        kind: CertKind,
        slot: RelaySlot,
        shares: &[SignatureShare],
        threshold: usize,
        ledger: &PossessionLedger,
        aggregator: ProcessId,
    ) -> Result<Certificate, AggregateError> {
        let mut signers = BTreeMap::new();
        for share in shares {
            if !self.share_verifies(share, kind.share_kind(), slot) {
                return Err(AggregateError::MixedTuples { signer: share.signer });
            }
            if !ledger.possesses(aggregator, share) {
                return Err(AggregateError::ForgeryAttempt {
                    aggregator,
                    signer: share.signer,
                });
            }
            signers.insert(share.signer, ());
        }
        let need = threshold.max(kind.threshold(self.f));
        if signers.len() < need {
            return Err(AggregateError::BelowThreshold {
                have: signers.len(),
                need,
            });
        }
        let signers: Vec<ProcessId> = signers.into_keys().collect();
        Ok(Certificate {
            kind,
            slot,
            token: self.token(kind, slot, &signers),
            signers,
        })
    }

    pub(crate) fn token_verifies(&self, cert: &Certificate) -> bool {
        self.token(cert.kind, cert.slot, &cert.signers) == cert.token
    }

    /// Token matches `(kind, slot, signers)` and the kind's threshold is met.
    pub fn verify(&self, cert: &Certificate) -> bool {
        (1..=self.f + 1).contains(&cert.slot.k)
            && cert.signers.windows(2).all(|w| w[0] < w[1])
            && cert.signers.iter().all(|p| p.0 < self.n)
            && cert.signers.len() >= cert.kind.threshold(self.f)
            && self.token_verifies(cert)
    }
}
