//! Per-process synchronizer state machine.
//!
//! Every handler takes the current state plus one input and returns the
//! list of [`Effect`]s to perform; nothing here touches a network or a
//! clock. The same instance plays two roles: a participant that moves
//! between rounds (`on_advance`, certificate handlers, timeouts) and a relay
//! that aggregates shares for the `(round, k)` slots it is assigned to.
//!
//! Timers: a pre-commit or commit send for `next_round` (re)arms a single
//! `Advance(next_round)` timer while the process has not yet entered that
//! round; every finalize send arms `Finalize(curr_round)`. Receiving the
//! certificate that completes the corresponding phase cancels the timer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::{PossessionLedger, SignatureShare, ThresholdScheme};
use crate::relay::RelaySchedule;
use crate::types::{
    CertKind, Certificate, Message, MessageKind, ProcessId, ProtocolConfig, RelaySlot, Round, Time,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "timer", content = "round")]
pub enum TimerKey {
    /// Pre-commit/commit timeout for the round being entered.
    Advance(Round),
    /// Finalize timeout for the current round.
    Finalize(Round),
}

/// Outputs of the state machine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Effect {
    Send {
        to: ProcessId,
        msg: Message,
    },
    /// Certificate to every process.
    Broadcast {
        cert: Certificate,
    },
    /// Certificate to an explicit recipient list (adversarial relays only).
    Multicast {
        to: Vec<ProcessId>,
        cert: Certificate,
    },
    ProposeRound(Round),
    SetTimer {
        key: TimerKey,
        after: Time,
    },
    CancelTimer(TimerKey),
}

/// Participant state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynchronizerState {
    pub curr_round: Round,
    pub next_round: Round,
    /// Highest relay index contacted, only for `curr_round` and `next_round`.
    round_relay: BTreeMap<Round, u32>,
    pub finalized: bool,
    seen_certs: BTreeSet<(CertKind, RelaySlot)>,
    sent: BTreeSet<(MessageKind, RelaySlot)>,
    pub pending_timers: BTreeSet<TimerKey>,
}

impl SynchronizerState {
    pub fn initial() -> Self {
        Self::at(Round::ZERO, Round::ZERO, true)
    }

    /// # Panics
    ///
    /// Panics if `curr > next`.
    pub fn at(curr: Round, next: Round, finalized: bool) -> Self {
        assert!(curr <= next, "curr_round must not exceed next_round");
        SynchronizerState {
            curr_round: curr,
            next_round: next,
            round_relay: BTreeMap::new(),
            finalized,
            seen_certs: BTreeSet::new(),
            sent: BTreeSet::new(),
            pending_timers: BTreeSet::new(),
        }
    }

    /// Defaults to 1 for rounds not contacted yet.
    pub fn round_relay(&self, round: Round) -> u32 {
        self.round_relay.get(&round).copied().unwrap_or(1)
    }

    pub fn retained_relay_rounds(&self) -> impl Iterator<Item = Round> + '_ {
        self.round_relay.keys().copied()
    }

    fn collect_garbage(&mut self) {
        let (curr, next) = (self.curr_round, self.next_round);
        self.round_relay.retain(|r, _| *r == curr || *r == next);
        self.seen_certs.retain(|(_, s)| s.round >= curr);
        self.sent.retain(|(_, s)| s.round >= curr);
    }
}

/// Shares collected by a relay for one `(kind, slot)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelayAccumulator {
    shares: BTreeMap<ProcessId, SignatureShare>,
    pub fired: bool,
}

impl RelayAccumulator {
    pub fn distinct_signers(&self) -> usize {
        self.shares.len()
    }
}

#[derive(Clone, Debug)]
pub struct Synchronizer {
    id: ProcessId,
    n: u32,
    f: u32,
    delta: Time,
    schedule: RelaySchedule,
    scheme: ThresholdScheme,
    state: SynchronizerState,
    relay: BTreeMap<(MessageKind, RelaySlot), RelayAccumulator>,
}

impl Synchronizer {
    pub fn new(id: ProcessId, cfg: &ProtocolConfig) -> Self {
        Self::with_state(id, cfg, SynchronizerState::initial()).0
    }

    /// Starts from an arbitrary state; returns the timers that state implies.
    pub fn with_state(id: ProcessId, cfg: &ProtocolConfig, state: SynchronizerState) -> (Self, Vec<Effect>) {
        let mut s = Synchronizer {
            id,
            n: cfg.n,
            f: cfg.f,
            delta: cfg.delta,
            schedule: RelaySchedule::for_config(cfg),
            scheme: ThresholdScheme::new(cfg),
            state,
            relay: BTreeMap::new(),
        };
        let mut fx = Vec::new();
        s.arm_advance(&mut fx);
        if !s.state.finalized {
            s.set_timer(TimerKey::Finalize(s.state.curr_round), &mut fx);
        }
        (s, fx)
    }

    pub fn id(&self) -> ProcessId {
        self.id
    }

    pub fn state(&self) -> &SynchronizerState {
        &self.state
    }

    pub fn accumulator(&self, kind: MessageKind, slot: RelaySlot) -> Option<&RelayAccumulator> {
        self.relay.get(&(kind, slot))
    }

    fn timeout(&self) -> Time {
        2 * self.delta
    }

    fn relay_of(&self, slot: RelaySlot) -> ProcessId {
        self.schedule
            .relay(slot.round, slot.k)
            .expect("relay index kept within [1, f+1]")
    }

    fn set_timer(&mut self, key: TimerKey, fx: &mut Vec<Effect>) {
        self.state.pending_timers.insert(key);
        fx.push(Effect::SetTimer {
            key,
            after: self.timeout(),
        });
    }

    fn cancel_timer(&mut self, key: TimerKey, fx: &mut Vec<Effect>) {
        if self.state.pending_timers.remove(&key) {
            fx.push(Effect::CancelTimer(key));
        }
    }

    fn arm_advance(&mut self, fx: &mut Vec<Effect>) {
        if self.state.curr_round < self.state.next_round {
            self.set_timer(TimerKey::Advance(self.state.next_round), fx);
        }
    }

    /// Sends one share to the slot's relay. Exact repeats are suppressed.
    fn send(&mut self, kind: MessageKind, slot: RelaySlot, fx: &mut Vec<Effect>) {
        if !self.state.sent.insert((kind, slot)) {
            return;
        }
        let msg = Message {
            kind,
            slot,
            sender: self.id,
            share: self.scheme.share(self.id, kind, slot),
        };
        fx.push(Effect::Send {
            to: self.relay_of(slot),
            msg,
        });
        if slot.round == self.state.next_round && kind != MessageKind::Finalize {
            self.arm_advance(fx);
        }
    }

    /// Stage 1: the pacemaker asks to move past the current round.
    pub fn on_advance(&mut self) -> Vec<Effect> {
        let mut fx = Vec::new();
        if self.state.curr_round < self.state.next_round {
            return fx;
        }
        self.state.next_round = self.state.curr_round.next();
        self.state.collect_garbage();
        let next = self.state.next_round;
        self.send(MessageKind::PreCommit, RelaySlot { round: next, k: 1 }, &mut fx);
        fx
    }

    /// Dispatches a verified certificate to its stage handler.
    pub fn on_certificate(&mut self, cert: &Certificate) -> Vec<Effect> {
        match cert.kind {
            CertKind::Tc => self.on_tc(cert),
            CertKind::Qc => self.on_qc(cert),
            CertKind::FinalizeAck => self.on_finalize_ack(cert),
        }
    }

    fn first_time(&mut self, cert: &Certificate) -> bool {
        self.state.seen_certs.insert((cert.kind, cert.slot))
    }

    /// Stage 3.
    pub fn on_tc(&mut self, cert: &Certificate) -> Vec<Effect> {
        let mut fx = Vec::new();
        debug_assert_eq!(cert.kind, CertKind::Tc);
        let RelaySlot { round: r, k } = cert.slot;
        if r < self.state.next_round || !self.first_time(cert) {
            return fx;
        }
        if r > self.state.next_round {
            let old = self.state.next_round;
            self.cancel_timer(TimerKey::Advance(old), &mut fx);
            self.state.next_round = r;
            self.state.collect_garbage();
            self.send(MessageKind::PreCommit, RelaySlot { round: r, k: 1 }, &mut fx);
        }
        self.send(MessageKind::Commit, RelaySlot { round: r, k }, &mut fx);
        fx
    }

    /// Stage 5.
    pub fn on_qc(&mut self, cert: &Certificate) -> Vec<Effect> {
        let mut fx = Vec::new();
        debug_assert_eq!(cert.kind, CertKind::Qc);
        let RelaySlot { round: r, k } = cert.slot;
        if r < self.state.curr_round || !self.first_time(cert) {
            return fx;
        }
        if r > self.state.curr_round {
            let prev = self.state.curr_round;
            self.cancel_timer(TimerKey::Finalize(prev), &mut fx);
            if self.state.next_round <= r {
                let old = self.state.next_round;
                self.cancel_timer(TimerKey::Advance(old), &mut fx);
            }
            self.state.curr_round = r;
            self.state.next_round = self.state.next_round.max(r);
            self.state.finalized = false;
            self.state.collect_garbage();
            self.send(MessageKind::Commit, RelaySlot { round: r, k: 1 }, &mut fx);
            fx.push(Effect::ProposeRound(r));
        }
        self.send(MessageKind::Finalize, RelaySlot { round: r, k }, &mut fx);
        if !self.state.finalized {
            self.set_timer(TimerKey::Finalize(r), &mut fx);
        }
        fx
    }

    /// Stage 7.
    pub fn on_finalize_ack(&mut self, cert: &Certificate) -> Vec<Effect> {
        let mut fx = Vec::new();
        debug_assert_eq!(cert.kind, CertKind::FinalizeAck);
        let r = cert.slot.round;
        if !self.first_time(cert) || r != self.state.curr_round || self.state.finalized {
            return fx;
        }
        self.state.finalized = true;
        self.cancel_timer(TimerKey::Finalize(r), &mut fx);
        fx
    }

    /// Routes a fired timer; timers that are no longer pending are ignored.
    pub fn on_timer(&mut self, key: TimerKey) -> Vec<Effect> {
        if !self.state.pending_timers.remove(&key) {
            return Vec::new();
        }
        match key {
            TimerKey::Advance(r) => self.timeout_advance(r),
            TimerKey::Finalize(r) => self.timeout_finalize(r),
        }
    }

    /// Pre-commit/commit timeout for `next_round`.
    pub fn on_timeout_advance(&mut self) -> Vec<Effect> {
        let r = self.state.next_round;
        self.state.pending_timers.remove(&TimerKey::Advance(r));
        self.timeout_advance(r)
    }

    /// Finalize timeout for `curr_round`.
    pub fn on_timeout_finalize(&mut self) -> Vec<Effect> {
        let r = self.state.curr_round;
        self.state.pending_timers.remove(&TimerKey::Finalize(r));
        self.timeout_finalize(r)
    }

    fn timeout_advance(&mut self, r: Round) -> Vec<Effect> {
        let mut fx = Vec::new();
        let st = &self.state;
        if r != st.next_round || st.curr_round >= st.next_round {
            return fx;
        }
        let k = st.round_relay(r);
        if k < self.f + 1 {
            self.state.round_relay.insert(r, k + 1);
            self.send(MessageKind::PreCommit, RelaySlot { round: r, k: k + 1 }, &mut fx);
        }
        fx
    }

    fn timeout_finalize(&mut self, r: Round) -> Vec<Effect> {
        let mut fx = Vec::new();
        if r != self.state.curr_round || self.state.finalized {
            return fx;
        }
        let k = self.state.round_relay(r);
        if k < self.f + 1 {
            self.state.round_relay.insert(r, k + 1);
            self.send(MessageKind::PreCommit, RelaySlot { round: r, k: k + 1 }, &mut fx);
            self.set_timer(TimerKey::Finalize(r), &mut fx);
        }
        fx
    }

    /// Relay stages 2, 4 and 6: aggregate the first `threshold` distinct
    /// valid shares for a slot this process serves and broadcast once.
    ///
    /// `ledger` must already hold the delivered share for this process.
    pub fn on_relay_message(&mut self, msg: &Message, ledger: &PossessionLedger) -> Vec<Effect> {
        let slot = msg.slot;
        if slot.k == 0
            || slot.k > self.f + 1
            || msg.sender.0 >= self.n
            || msg.share.signer != msg.sender
            || !self.scheme.share_verifies(&msg.share, msg.kind, slot)
            || self.relay_of(slot) != self.id
        {
            return Vec::new();
        }
        let kind = msg.kind.certificate();
        let threshold = kind.threshold(self.f);
        let acc = self.relay.entry((msg.kind, slot)).or_default();
        if acc.fired {
            return Vec::new();
        }
        acc.shares.insert(msg.sender, msg.share.clone());
        if acc.shares.len() < threshold {
            return Vec::new();
        }
        let shares: Vec<SignatureShare> = acc.shares.values().cloned().collect();
        match self
            .scheme
            .aggregate(kind, slot, &shares, threshold, ledger, self.id)
        {
            Ok(cert) => {
                acc.fired = true;
                acc.shares.clear();
                vec![Effect::Broadcast { cert }]
            }
            Err(_) => Vec::new(),
        }
    }

    /// Stage 2 entry point.
    pub fn relay_on_precommit(&mut self, msg: &Message, ledger: &PossessionLedger) -> Vec<Effect> {
        self.relay_kind(MessageKind::PreCommit, msg, ledger)
    }

    /// Stage 4 entry point.
    pub fn relay_on_commit(&mut self, msg: &Message, ledger: &PossessionLedger) -> Vec<Effect> {
        self.relay_kind(MessageKind::Commit, msg, ledger)
    }

    /// Stage 6 entry point.
    pub fn relay_on_finalize(&mut self, msg: &Message, ledger: &PossessionLedger) -> Vec<Effect> {
        self.relay_kind(MessageKind::Finalize, msg, ledger)
    }

    fn relay_kind(&mut self, kind: MessageKind, msg: &Message, ledger: &PossessionLedger) -> Vec<Effect> {
        if msg.kind != kind {
            return Vec::new();
        }
        self.on_relay_message(msg, ledger)
    }
}
