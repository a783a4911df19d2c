//! Event loop.
//!
//! Events are ordered by `(time, class, seq)`. At equal times deliveries run
//! before timers, and the synchronization probe runs last, so a reply that
//! arrives exactly at a timeout deadline wins the race.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::adversary::{held_shares, selective_broadcast, ByzantineStrategy, ScriptedAction};
use super::network::{adversary_deliver_schedule, NetworkModel};
use super::trace::{Trace, TraceEvent, TraceHeader, TraceRecord};
use super::{InFlightPayload, Scenario, SimError, DEFAULT_MAX_EVENTS};
use crate::crypto::{PossessionLedger, ThresholdScheme};
use crate::pacemaker::Pacemaker;
use crate::relay::RelaySchedule;
use crate::synchronizer::{Effect, Synchronizer, SynchronizerState, TimerKey};
use crate::types::{
    validate_message, CertKind, Certificate, Message, MessageKind, Payload, ProcessId, ProtocolConfig,
    RelaySlot, Round, Time,
};

const NET_STREAM: u64 = u64::MAX;
const ADV_STREAM: u64 = u64::MAX - 1;

const CLASS_DELIVER: u8 = 0;
const CLASS_SCRIPT: u8 = 1;
const CLASS_TIMER: u8 = 2;
const CLASS_TICK: u8 = 3;
const CLASS_PROBE: u8 = 4;

enum Action {
    Deliver {
        from: ProcessId,
        to: ProcessId,
        payload: Payload,
    },
    Script {
        p: ProcessId,
        idx: usize,
    },
    Timer {
        p: ProcessId,
        key: TimerKey,
        gen: u64,
    },
    Tick {
        p: ProcessId,
        gen: u64,
    },
    Probe {
        epoch: u64,
    },
}

struct Event {
    time: Time,
    class: u8,
    seq: u64,
    action: Action,
}

impl Event {
    fn key(&self) -> (Time, u8, u64) {
        (self.time, self.class, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: `BinaryHeap` is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

struct Node {
    sync: Option<Synchronizer>,
    pm: Option<Pacemaker>,
    pm_gen: u64,
    strategy: Option<ByzantineStrategy>,
    /// Slots a Byzantine relay has already aggregated.
    fired: BTreeSet<(MessageKind, RelaySlot)>,
}

/// Tracks whether every correct process shares a round with a correct
/// leader, so runs can stop after a number of synchronization times.
struct SyncProbe {
    rounds: Vec<Option<Round>>,
    epoch: u64,
    confirmed: u32,
}

struct Engine<'a> {
    cfg: &'a ProtocolConfig,
    scenario: &'a Scenario,
    schedule: RelaySchedule,
    scheme: ThresholdScheme,
    corrupt: BTreeSet<ProcessId>,
    nodes: Vec<Node>,
    ledger: PossessionLedger,
    queue: BinaryHeap<Event>,
    seq: u64,
    timers: HashMap<(ProcessId, TimerKey), u64>,
    timer_gen: u64,
    net: NetworkModel,
    net_rng: ChaCha12Rng,
    adv_rng: ChaCha12Rng,
    probe: SyncProbe,
    records: Vec<TraceRecord>,
    stopped: bool,
}

/// Executes `scenario` to its stop condition and returns the full trace.
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    scenario.validate()?;
    let mut engine = Engine::new(scenario);
    engine.init();
    let end = engine.event_loop();
    Ok(Trace {
        header: TraceHeader {
            protocol: scenario.protocol.clone(),
            corrupt: engine.corrupt.iter().copied().collect(),
        },
        records: engine.records,
        end,
    })
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario) -> Self {
        let cfg = &scenario.protocol;
        let mut net_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        net_rng.set_stream(NET_STREAM);
        let mut adv_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        adv_rng.set_stream(ADV_STREAM);
        let corrupt = scenario.corrupt();
        Engine {
            cfg,
            scenario,
            schedule: RelaySchedule::for_config(cfg),
            scheme: ThresholdScheme::new(cfg),
            nodes: Vec::with_capacity(cfg.n as usize),
            ledger: PossessionLedger::default(),
            queue: BinaryHeap::new(),
            seq: 0,
            timers: HashMap::new(),
            timer_gen: 0,
            net: NetworkModel::with_policy(cfg.gst, cfg.delta, scenario.network),
            net_rng,
            adv_rng,
            probe: SyncProbe {
                rounds: vec![None; cfg.n as usize],
                epoch: 0,
                confirmed: 0,
            },
            records: Vec::new(),
            stopped: false,
            corrupt,
        }
    }

    fn push(&mut self, time: Time, class: u8, action: Action) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            class,
            seq: self.seq,
            action,
        });
    }

    fn record(&mut self, t: Time, ev: TraceEvent) {
        self.records.push(TraceRecord { t, ev });
    }

    fn init(&mut self) {
        let cfg = self.cfg;
        let mut initial = vec![SynchronizerState::initial(); cfg.n as usize];
        for init in &self.scenario.initial {
            let next = init.next.unwrap_or(init.curr);
            initial[init.process.index()] = SynchronizerState::at(init.curr, next, init.finalized);
        }
        let strategies: HashMap<ProcessId, ByzantineStrategy> = self
            .scenario
            .byzantine
            .iter()
            .map(|b| (b.process, b.strategy.clone()))
            .collect();
        let mut pending = Vec::new();
        for p in cfg.processes() {
            let state = initial[p.index()].clone();
            let strategy = strategies.get(&p).cloned();
            let runs = strategy.as_ref().is_none_or(ByzantineStrategy::participates);
            self.record(
                0,
                TraceEvent::Init {
                    p,
                    curr: state.curr_round,
                    next: state.next_round,
                    finalized: state.finalized,
                    byzantine: strategy.is_some(),
                },
            );
            let (sync, pm) = if runs {
                let curr = state.curr_round;
                let (sync, fx) = Synchronizer::with_state(p, cfg, state);
                pending.push((p, fx));
                (Some(sync), Some(Pacemaker::start(cfg, curr, 0)))
            } else {
                (None, None)
            };
            if strategy.is_none() {
                self.probe.rounds[p.index()] = Some(initial[p.index()].curr_round);
            }
            if let Some(ByzantineStrategy::Scripted { actions, .. }) = &strategy {
                for (idx, a) in actions.iter().enumerate() {
                    self.push(a.at(), CLASS_SCRIPT, Action::Script { p, idx });
                }
            }
            self.nodes.push(Node {
                sync,
                pm,
                pm_gen: 0,
                strategy,
                fired: BTreeSet::new(),
            });
        }
        for (p, fx) in pending {
            self.schedule_tick(p);
            self.apply(p, fx, 0);
        }
        for m in &self.scenario.in_flight {
            let payload = match &m.payload {
                InFlightPayload::Share { kind, slot } => {
                    let share = self.scheme.sign_share(&mut self.ledger, m.from, *kind, *slot);
                    Payload::Message(Message {
                        kind: *kind,
                        slot: *slot,
                        sender: m.from,
                        share,
                    })
                }
                InFlightPayload::Certificate { kind, slot, signers } => {
                    match self.preload_cert(m.from, *kind, *slot, signers) {
                        Ok(cert) => Payload::Certificate(cert),
                        Err(reason) => {
                            self.record(0, TraceEvent::Rejected { p: m.from, reason });
                            continue;
                        }
                    }
                }
            };
            self.record(
                0,
                TraceEvent::Preload {
                    from: m.from,
                    to: m.to,
                    payload: payload.clone(),
                },
            );
            self.push(
                m.deliver_at,
                CLASS_DELIVER,
                Action::Deliver {
                    from: m.from,
                    to: m.to,
                    payload,
                },
            );
        }
        self.probe_changed(0);
    }

    /// Certificates from before the run: the holder is granted the listed
    /// shares, and aggregation still enforces the threshold.
    fn preload_cert(
        &mut self,
        holder: ProcessId,
        kind: CertKind,
        slot: RelaySlot,
        signers: &[ProcessId],
    ) -> Result<Certificate, String> {
        let shares: Vec<_> = signers
            .iter()
            .filter(|s| self.cfg.contains(**s))
            .map(|s| {
                let share = self
                    .scheme
                    .sign_share(&mut self.ledger, *s, kind.share_kind(), slot);
                self.ledger.record(holder, share.clone());
                share
            })
            .collect();
        self.scheme
            .aggregate(
                kind,
                slot,
                &shares,
                kind.threshold(self.cfg.f),
                &self.ledger,
                holder,
            )
            .map_err(|e| e.to_string())
    }

    fn event_loop(&mut self) -> Time {
        let max_time = self.scenario.stop.max_time;
        let max_events = self.scenario.stop.max_events.unwrap_or(DEFAULT_MAX_EVENTS);
        let mut processed = 0u64;
        let mut now = 0;
        while let Some(ev) = self.queue.pop() {
            if max_time.is_some_and(|m| ev.time > m) {
                return max_time.unwrap_or(now);
            }
            if processed >= max_events {
                return now;
            }
            processed += 1;
            now = ev.time;
            self.dispatch(ev.action, now);
            if self.stopped {
                return now;
            }
        }
        max_time.unwrap_or(now)
    }

    fn dispatch(&mut self, action: Action, now: Time) {
        match action {
            Action::Deliver { from, to, payload } => self.deliver(from, to, payload, now),
            Action::Script { p, idx } => self.script(p, idx, now),
            Action::Timer { p, key, gen } => {
                if self.timers.get(&(p, key)) != Some(&gen) {
                    return;
                }
                self.timers.remove(&(p, key));
                self.record(now, TraceEvent::Timeout { p, key });
                let fx = match self.nodes[p.index()].sync.as_mut() {
                    Some(sync) => sync.on_timer(key),
                    None => return,
                };
                self.apply(p, fx, now);
            }
            Action::Tick { p, gen } => {
                let node = &mut self.nodes[p.index()];
                if node.pm_gen != gen {
                    return;
                }
                let (Some(pm), Some(sync)) = (node.pm.as_mut(), node.sync.as_mut()) else {
                    return;
                };
                if !pm.on_tick(now) {
                    return;
                }
                let curr = sync.state().curr_round;
                let fx = sync.on_advance();
                self.record(now, TraceEvent::Advance { p, curr });
                self.apply(p, fx, now);
            }
            Action::Probe { epoch } => {
                if epoch != self.probe.epoch {
                    return;
                }
                self.probe.confirmed += 1;
                if self
                    .scenario
                    .stop
                    .max_syncs
                    .is_some_and(|k| self.probe.confirmed >= k)
                {
                    self.stopped = true;
                }
            }
        }
    }

    fn schedule_tick(&mut self, p: ProcessId) {
        let node = &mut self.nodes[p.index()];
        node.pm_gen += 1;
        let gen = node.pm_gen;
        if let Some(deadline) = node.pm.as_ref().and_then(Pacemaker::deadline) {
            self.push(deadline, CLASS_TICK, Action::Tick { p, gen });
        }
    }

    fn probe_changed(&mut self, now: Time) {
        self.probe.epoch += 1;
        let mut rounds = self.probe.rounds.iter().flatten();
        let Some(&r) = rounds.next() else {
            return;
        };
        if rounds.all(|x| *x == r) && !self.corrupt.contains(&self.schedule.leader(r)) {
            let epoch = self.probe.epoch;
            self.push(now + self.cfg.cap_delta, CLASS_PROBE, Action::Probe { epoch });
        }
    }

    fn transmit(&mut self, from: ProcessId, to: ProcessId, payload: Payload, now: Time) {
        let at = adversary_deliver_schedule(now, &self.net, &mut self.net_rng);
        self.push(at, CLASS_DELIVER, Action::Deliver { from, to, payload });
    }

    fn send_cert(&mut self, from: ProcessId, to: Vec<ProcessId>, cert: Certificate, now: Time) {
        for &q in &to {
            self.transmit(from, q, Payload::Certificate(cert.clone()), now);
        }
        self.record(now, TraceEvent::Broadcast { from, to, cert });
    }

    fn apply(&mut self, p: ProcessId, fx: Vec<Effect>, now: Time) {
        for effect in fx {
            match effect {
                Effect::Send { to, msg } => {
                    self.ledger.record(p, msg.share.clone());
                    self.record(
                        now,
                        TraceEvent::Send {
                            from: p,
                            to,
                            msg: msg.clone(),
                        },
                    );
                    self.transmit(p, to, Payload::Message(msg), now);
                }
                Effect::Broadcast { cert } => {
                    let to = self.cfg.processes().collect();
                    self.send_cert(p, to, cert, now);
                }
                Effect::Multicast { to, cert } => self.send_cert(p, to, cert, now),
                Effect::ProposeRound(round) => self.enter(p, round, now),
                Effect::SetTimer { key, after } => {
                    self.timer_gen += 1;
                    let gen = self.timer_gen;
                    self.timers.insert((p, key), gen);
                    self.push(now + after, CLASS_TIMER, Action::Timer { p, key, gen });
                }
                Effect::CancelTimer(key) => {
                    self.timers.remove(&(p, key));
                }
            }
        }
    }

    fn enter(&mut self, p: ProcessId, round: Round, now: Time) {
        self.record(now, TraceEvent::Enter { p, round });
        let Some(pm) = self.nodes[p.index()].pm.as_mut() else {
            return;
        };
        match pm.on_propose_round(round, now) {
            Ok(nl) => {
                self.record(
                    now,
                    TraceEvent::NewLeader {
                        p,
                        round: nl.round,
                        leader: nl.leader,
                    },
                );
                self.schedule_tick(p);
            }
            Err(e) => self.record(
                now,
                TraceEvent::Rejected {
                    p,
                    reason: e.to_string(),
                },
            ),
        }
        if !self.corrupt.contains(&p) {
            self.probe.rounds[p.index()] = Some(round);
            self.probe_changed(now);
        }
    }

    fn reject(&mut self, p: ProcessId, now: Time, reason: impl ToString) {
        self.record(
            now,
            TraceEvent::Rejected {
                p,
                reason: reason.to_string(),
            },
        );
    }

    fn deliver(&mut self, from: ProcessId, to: ProcessId, payload: Payload, now: Time) {
        self.record(
            now,
            TraceEvent::Deliver {
                from,
                to,
                payload: payload.clone(),
            },
        );
        match payload {
            Payload::Message(msg) => {
                if let Err(e) = validate_message(&msg, self.cfg) {
                    return self.reject(to, now, e);
                }
                if msg.sender != from {
                    return self.reject(to, now, "share sender differs from link sender");
                }
                self.ledger.record(to, msg.share.clone());
                if self.nodes[to.index()].strategy.is_some() {
                    self.byzantine_relay(to, &msg, now);
                } else if let Some(sync) = self.nodes[to.index()].sync.as_mut() {
                    let fx = sync.on_relay_message(&msg, &self.ledger);
                    self.apply(to, fx, now);
                }
            }
            Payload::Certificate(cert) => {
                if !self.scheme.verify(&cert) {
                    return self.reject(to, now, "certificate does not verify");
                }
                let Some(sync) = self.nodes[to.index()].sync.as_mut() else {
                    return;
                };
                let was_finalized = sync.state().finalized;
                let fx = sync.on_certificate(&cert);
                let state = sync.state();
                let newly = cert.kind == CertKind::FinalizeAck && !was_finalized && state.finalized;
                let round = state.curr_round;
                self.apply(to, fx, now);
                if newly {
                    self.record(now, TraceEvent::Finalized { p: to, round });
                }
            }
        }
    }

    fn byzantine_relay(&mut self, p: ProcessId, msg: &Message, now: Time) {
        let Some(strategy) = self.nodes[p.index()].strategy.clone() else {
            return;
        };
        let ByzantineStrategy::SelectiveBroadcast { collude, .. } = strategy else {
            return;
        };
        let slot = msg.slot;
        if self.schedule.relay(slot.round, slot.k) != Ok(p)
            || self.nodes[p.index()].fired.contains(&(msg.kind, slot))
        {
            return;
        }
        if collude {
            for c in self.corrupt.clone() {
                let share = self.scheme.sign_share(&mut self.ledger, c, msg.kind, slot);
                self.ledger.record(p, share);
            }
        }
        let kind = msg.kind.certificate();
        let held = held_shares(&self.scheme, &self.ledger, p, self.cfg.n, msg.kind, slot).len();
        if held < kind.threshold(self.cfg.f) {
            return;
        }
        let policy = strategy.targets(kind).cloned().unwrap_or_default();
        let targets = policy.resolve(self.cfg.n, &mut self.adv_rng);
        match selective_broadcast(
            &self.scheme,
            &self.ledger,
            p,
            self.cfg.n,
            self.cfg.f,
            kind,
            slot,
            targets,
        ) {
            Ok(effect) => {
                self.nodes[p.index()].fired.insert((msg.kind, slot));
                self.apply(p, vec![effect], now);
            }
            Err(e) => self.reject(p, now, e),
        }
    }

    fn script(&mut self, p: ProcessId, idx: usize, now: Time) {
        let Some(ByzantineStrategy::Scripted { actions, .. }) = &self.nodes[p.index()].strategy else {
            return;
        };
        match actions[idx].clone() {
            ScriptedAction::SendShare { kind, slot, to, .. } => {
                let share = self.scheme.sign_share(&mut self.ledger, p, kind, slot);
                for q in to {
                    let msg = Message {
                        kind,
                        slot,
                        sender: p,
                        share: share.clone(),
                    };
                    self.apply(p, vec![Effect::Send { to: q, msg }], now);
                }
            }
            ScriptedAction::Certify {
                kind,
                slot,
                signers,
                to,
                ..
            } => {
                let shares = match signers {
                    Some(list) => list
                        .iter()
                        .map(|s| self.scheme.share(*s, kind.share_kind(), slot))
                        .collect(),
                    None => held_shares(&self.scheme, &self.ledger, p, self.cfg.n, kind.share_kind(), slot),
                };
                match self
                    .scheme
                    .aggregate(kind, slot, &shares, kind.threshold(self.cfg.f), &self.ledger, p)
                {
                    Ok(cert) => self.apply(p, vec![Effect::Multicast { to, cert }], now),
                    Err(e) => self.reject(p, now, e),
                }
            }
        }
    }
}
