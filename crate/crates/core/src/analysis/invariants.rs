//! Safety and timing checks over a finished trace.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::metrics::entered_by;
use super::timeline::RoundTimeline;
use crate::sim::{Trace, TraceEvent};
use crate::types::{CertKind, Certificate, Message, MessageKind, Payload, ProcessId, RelaySlot, Round, Time};

/// Stabilization constant: all correct processes follow the first entrant
/// of a round within this many δ.
pub const C1_DELTAS: u64 = 4;
/// Progress constant: all correct processes enter the next round within
/// this many δ of the `(f+1)`-th advance.
pub const C2_DELTAS: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "property", rename_all = "snake_case")]
pub enum Violation {
    Monotonicity {
        p: ProcessId,
        t: Time,
        from: Round,
        to: Round,
    },
    Validity {
        p: ProcessId,
        t: Time,
        round: Round,
    },
    LeaderAgreement {
        round: Round,
        leaders: Vec<ProcessId>,
    },
    FinalizeAck {
        p: ProcessId,
        t: Time,
        round: Round,
        entered: usize,
    },
    LedgerSoundness {
        t: Time,
        detail: String,
    },
    StabilizationTiming {
        round: Round,
        t0: Time,
        late: ProcessId,
    },
    ProgressTiming {
        round: Round,
        t0: Time,
        late: ProcessId,
    },
}

impl Violation {
    pub fn property(&self) -> &'static str {
        match self {
            Violation::Monotonicity { .. } => "Property 3 monotonicity",
            Violation::Validity { .. } => "Property 4 validity",
            Violation::LeaderAgreement { .. } => "Property 1 leader agreement",
            Violation::FinalizeAck { .. } => "finalize-ack implication",
            Violation::LedgerSoundness { .. } => "ledger soundness",
            Violation::StabilizationTiming { .. } => "S2 stabilization timing",
            Violation::ProgressTiming { .. } => "P2 progress timing",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.property())?;
        match self {
            Violation::Monotonicity { p, t, from, to } => {
                write!(f, "{p} entered round {to} after round {from} at t={t}")
            }
            Violation::Validity { p, t, round } => write!(
                f,
                "{p} entered round {round} at t={t} but no correct process advanced from the round before"
            ),
            Violation::LeaderAgreement { round, leaders } => {
                write!(f, "round {round} has leaders {leaders:?}")
            }
            Violation::FinalizeAck {
                p,
                t,
                round,
                entered,
            } => write!(
                f,
                "{p} received a finalize-ack for round {round} at t={t} when only {entered} correct processes had entered it"
            ),
            Violation::LedgerSoundness { t, detail } => write!(f, "t={t}: {detail}"),
            Violation::StabilizationTiming { round, t0, late }
            | Violation::ProgressTiming { round, t0, late } => {
                write!(f, "{late} missed the bound for round {round} (t0={t0})")
            }
        }
    }
}

/// Rounds at or below this are exempt from the causal checks: they may be
/// justified by history that precedes the run (arbitrary initial states and
/// preloaded certificates).
pub fn exempt_round(trace: &Trace) -> Round {
    trace
        .records
        .iter()
        .filter_map(|rec| match &rec.ev {
            TraceEvent::Init { curr, next, .. } => Some((*curr).max(*next)),
            TraceEvent::Preload { payload, .. } => Some(match payload {
                Payload::Message(m) => m.slot.round,
                Payload::Certificate(c) => c.slot.round,
            }),
            _ => None,
        })
        .max()
        .unwrap_or(Round::ZERO)
}

pub fn check_monotonicity(trace: &Trace) -> Vec<Violation> {
    let mut last: HashMap<ProcessId, Round> = HashMap::new();
    let mut out = Vec::new();
    for rec in &trace.records {
        match rec.ev {
            TraceEvent::Init { p, curr, .. } => {
                last.insert(p, curr);
            }
            TraceEvent::Enter { p, round } if !trace.is_corrupt(p) => {
                let prev = last.insert(p, round).unwrap_or(Round::ZERO);
                if round <= prev {
                    out.push(Violation::Monotonicity {
                        p,
                        t: rec.t,
                        from: prev,
                        to: round,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

pub fn check_validity(trace: &Trace) -> Vec<Violation> {
    let exempt = exempt_round(trace);
    let mut advanced: HashSet<Round> = HashSet::new();
    let mut out = Vec::new();
    for rec in &trace.records {
        match rec.ev {
            TraceEvent::Advance { p, curr } if !trace.is_corrupt(p) => {
                advanced.insert(curr);
            }
            TraceEvent::Enter { p, round }
                if !trace.is_corrupt(p)
                    && round > exempt
                    && (round.0 == 0 || !advanced.contains(&Round(round.0 - 1))) =>
            {
                out.push(Violation::Validity { p, t: rec.t, round });
            }
            _ => {}
        }
    }
    out
}

pub fn check_leader_agreement(trace: &Trace) -> Vec<Violation> {
    let mut leaders: BTreeMap<Round, BTreeSet<ProcessId>> = BTreeMap::new();
    for rec in &trace.records {
        if let TraceEvent::NewLeader { p, round, leader } = rec.ev {
            if !trace.is_corrupt(p) {
                leaders.entry(round).or_default().insert(leader);
            }
        }
    }
    leaders
        .into_iter()
        .filter(|(_, set)| set.len() > 1)
        .map(|(round, set)| Violation::LeaderAgreement {
            round,
            leaders: set.into_iter().collect(),
        })
        .collect()
}

/// Receipt of a finalize-ack for `r` by a correct process implies at least
/// `f+1` correct processes had entered `r`.
pub fn check_finalize_ack(trace: &Trace) -> Vec<Violation> {
    let f = trace.header.protocol.f as usize;
    let exempt = exempt_round(trace);
    let tl = RoundTimeline::from_trace(trace);
    let mut out = Vec::new();
    for rec in &trace.records {
        let TraceEvent::Deliver {
            to,
            payload: Payload::Certificate(cert),
            ..
        } = &rec.ev
        else {
            continue;
        };
        if cert.kind != CertKind::FinalizeAck || trace.is_corrupt(*to) || cert.slot.round <= exempt {
            continue;
        }
        let entered = entered_by(&tl, cert.slot.round, rec.t).len();
        if entered <= f {
            out.push(Violation::FinalizeAck {
                p: *to,
                t: rec.t,
                round: cert.slot.round,
                entered,
            });
        }
    }
    out
}

/// Every certificate is built from shares its sender held, every delivered
/// payload was sent, and every correct aggregate carries only shares the
/// aggregator received.
pub fn check_ledger_soundness(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    // Shares each process has been handed: (holder, kind, slot, signer).
    let mut held: HashSet<(ProcessId, MessageKind, RelaySlot, ProcessId)> = HashSet::new();
    let mut sent_msgs: HashSet<(ProcessId, ProcessId, Message)> = HashSet::new();
    let mut sent_certs: HashSet<(ProcessId, ProcessId, Certificate)> = HashSet::new();
    let grant = |held: &mut HashSet<_>, holder, c: &Certificate| {
        for s in &c.signers {
            held.insert((holder, c.kind.share_kind(), c.slot, *s));
        }
    };
    for rec in &trace.records {
        match &rec.ev {
            TraceEvent::Preload { from, to, payload } => match payload {
                Payload::Message(m) => {
                    sent_msgs.insert((*from, *to, m.clone()));
                }
                Payload::Certificate(c) => {
                    grant(&mut held, *from, c);
                    sent_certs.insert((*from, *to, c.clone()));
                }
            },
            TraceEvent::Send { from, to, msg } => {
                if msg.sender != *from {
                    out.push(Violation::LedgerSoundness {
                        t: rec.t,
                        detail: format!("{from} sent a share signed by {}", msg.sender),
                    });
                }
                sent_msgs.insert((*from, *to, msg.clone()));
            }
            TraceEvent::Deliver { from, to, payload } => match payload {
                Payload::Message(m) => {
                    if !sent_msgs.contains(&(*from, *to, m.clone())) {
                        out.push(Violation::LedgerSoundness {
                            t: rec.t,
                            detail: format!("message {from} -> {to} delivered but never sent"),
                        });
                    }
                    held.insert((*to, m.kind, m.slot, m.sender));
                }
                Payload::Certificate(c) => {
                    if !sent_certs.contains(&(*from, *to, c.clone())) {
                        out.push(Violation::LedgerSoundness {
                            t: rec.t,
                            detail: format!("certificate {from} -> {to} delivered but never sent"),
                        });
                    }
                }
            },
            TraceEvent::Broadcast { from, to, cert } => {
                let from_corrupt = trace.is_corrupt(*from);
                for s in &cert.signers {
                    let ok = s == from
                        || (from_corrupt && trace.is_corrupt(*s))
                        || held.contains(&(*from, cert.kind.share_kind(), cert.slot, *s));
                    if !ok {
                        out.push(Violation::LedgerSoundness {
                            t: rec.t,
                            detail: format!(
                                "{from} aggregated {s}'s share for {} without holding it",
                                cert.slot
                            ),
                        });
                    }
                }
                for q in to {
                    sent_certs.insert((*from, *q, cert.clone()));
                }
            }
            _ => {}
        }
    }
    out
}

/// One measured instance of the stabilization or progress bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TimingSample {
    pub round: Round,
    pub t0: Time,
    /// Last correct entry into `round`.
    pub t2: Time,
    pub bound: Time,
}

impl TimingSample {
    pub fn holds(&self) -> bool {
        self.t2 - self.t0 <= self.bound
    }
}

/// S2 instances: rounds first entered at `t0 >= GST` with a correct first
/// relay, where no correct process goes higher by `t0 + c1`.
pub fn s2_samples(trace: &Trace) -> (Vec<TimingSample>, Vec<Violation>) {
    let cfg = &trace.header.protocol;
    let bound = C1_DELTAS * cfg.delta;
    let tl = RoundTimeline::from_trace(trace);
    let mut samples = Vec::new();
    let mut bad = Vec::new();
    for (t0, r) in tl.r_max_steps() {
        if t0 < cfg.gst || tl.corrupt.contains(&tl.schedule.leader(r)) {
            continue;
        }
        if t0 + bound > trace.end || tl.r_max_at(t0 + bound) > r {
            continue;
        }
        let mut t2 = t0;
        for p in tl.entries.keys() {
            match tl.reached(*p, r) {
                Some(t) if t <= t0 + bound => t2 = t2.max(t),
                _ => bad.push(Violation::StabilizationTiming {
                    round: r,
                    t0,
                    late: *p,
                }),
            }
        }
        samples.push(TimingSample {
            round: r,
            t0,
            t2,
            bound,
        });
    }
    (samples, bad)
}

/// P2 instances: `t0` is the `(f+1)`-th correct `advance()` in round `r`,
/// at or after GST, with a correct first relay for `r+1`, while nobody is
/// beyond `r+1` by `t0 + c2`.
pub fn p2_samples(trace: &Trace) -> (Vec<TimingSample>, Vec<Violation>) {
    let cfg = &trace.header.protocol;
    let bound = C2_DELTAS * cfg.delta;
    let tl = RoundTimeline::from_trace(trace);
    let mut callers: BTreeMap<Round, BTreeSet<ProcessId>> = BTreeMap::new();
    let mut t0s: BTreeMap<Round, Time> = BTreeMap::new();
    for rec in &trace.records {
        if let TraceEvent::Advance { p, curr } = rec.ev {
            if trace.is_corrupt(p) {
                continue;
            }
            let set = callers.entry(curr).or_default();
            set.insert(p);
            if set.len() == cfg.f as usize + 1 {
                t0s.insert(curr, rec.t);
            }
        }
    }
    let mut samples = Vec::new();
    let mut bad = Vec::new();
    for (r, t0) in t0s {
        let next = r.next();
        if t0 < cfg.gst || tl.corrupt.contains(&tl.schedule.leader(next)) {
            continue;
        }
        if tl.r_max_at(t0) != r || t0 + bound > trace.end || tl.r_max_at(t0 + bound) > next {
            continue;
        }
        let mut t2 = t0;
        for p in tl.entries.keys() {
            match tl.reached(*p, next) {
                Some(t) if t <= t0 + bound => t2 = t2.max(t),
                _ => bad.push(Violation::ProgressTiming {
                    round: next,
                    t0,
                    late: *p,
                }),
            }
        }
        samples.push(TimingSample {
            round: next,
            t0,
            t2,
            bound,
        });
    }
    (samples, bad)
}

/// Safety checks: monotonicity, validity, leader agreement, finalize-ack
/// implication and ledger soundness.
pub fn check_safety(trace: &Trace) -> Vec<Violation> {
    let mut v = check_monotonicity(trace);
    v.extend(check_validity(trace));
    v.extend(check_leader_agreement(trace));
    v.extend(check_finalize_ack(trace));
    v.extend(check_ledger_soundness(trace));
    v
}

/// Safety plus the S2/P2 timing bounds for rounds above the exempt prefix.
pub fn check_all(trace: &Trace) -> Vec<Violation> {
    let exempt = exempt_round(trace);
    let mut v = check_safety(trace);
    let (_, s2) = s2_samples(trace);
    let (_, p2) = p2_samples(trace);
    v.extend(s2.into_iter().chain(p2).filter(|x| match x {
        Violation::StabilizationTiming { round, .. } | Violation::ProgressTiming { round, .. } => {
            round.0 > exempt.0 + 1
        }
        _ => true,
    }));
    v
}
