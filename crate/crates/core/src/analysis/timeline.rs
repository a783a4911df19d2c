//! Per-process round timelines and synchronization-time detection.
//!
//! A process is in its new round from the entry instant on: round membership
//! uses half-open intervals `[entry, next entry)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::relay::RelaySchedule;
use crate::sim::{Trace, TraceEvent};
use crate::types::{ProcessId, Round, Time};

#[derive(Clone, Debug)]
pub struct RoundTimeline {
    /// Correct processes only; the first entry is the initial round at 0.
    pub entries: BTreeMap<ProcessId, Vec<(Time, Round)>>,
    pub corrupt: BTreeSet<ProcessId>,
    pub gst: Time,
    pub cap_delta: Time,
    pub end: Time,
    pub schedule: RelaySchedule,
}

/// A synchronization time: every correct process is in `round` throughout
/// `[t, t + Δ]` and `leader` is correct.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SyncTime {
    pub t: Time,
    pub round: Round,
    pub leader: ProcessId,
}

impl RoundTimeline {
    pub fn from_trace(trace: &Trace) -> Self {
        let cfg = &trace.header.protocol;
        let corrupt: BTreeSet<ProcessId> = trace.header.corrupt.iter().copied().collect();
        let mut entries: BTreeMap<ProcessId, Vec<(Time, Round)>> = BTreeMap::new();
        for rec in &trace.records {
            match rec.ev {
                TraceEvent::Init { p, curr, .. } if !corrupt.contains(&p) => {
                    entries.entry(p).or_default().insert(0, (0, curr));
                }
                TraceEvent::Enter { p, round } if !corrupt.contains(&p) => {
                    entries.entry(p).or_default().push((rec.t, round));
                }
                _ => {}
            }
        }
        RoundTimeline {
            entries,
            corrupt,
            gst: cfg.gst,
            cap_delta: cfg.cap_delta,
            end: trace.end,
            schedule: RelaySchedule::for_config(cfg),
        }
    }

    /// Round of correct process `p` at `t`.
    pub fn round_at(&self, p: ProcessId, t: Time) -> Round {
        let list = &self.entries[&p];
        let idx = list.partition_point(|(et, _)| *et <= t);
        list[idx.saturating_sub(1)].1
    }

    /// Highest round any correct process is in at `t`.
    pub fn r_max_at(&self, t: Time) -> Round {
        self.entries
            .keys()
            .map(|p| self.round_at(*p, t))
            .max()
            .unwrap_or(Round::ZERO)
    }

    /// Sorted distinct instants at which some correct process changes round.
    pub fn change_times(&self) -> Vec<Time> {
        let set: BTreeSet<Time> = self.entries.values().flatten().map(|(t, _)| *t).collect();
        set.into_iter().collect()
    }

    /// `(t, r)` for every instant a correct process first enters a round
    /// above every round seen so far, start-up included.
    pub fn r_max_steps(&self) -> Vec<(Time, Round)> {
        let mut all: Vec<(Time, Round)> = self.entries.values().flatten().copied().collect();
        all.sort();
        let mut out: Vec<(Time, Round)> = Vec::new();
        for (t, r) in all {
            match out.last() {
                Some((_, top)) if r <= *top => {}
                Some((lt, _)) if *lt == t => {
                    out.last_mut().expect("nonempty").1 = r;
                }
                _ => out.push((t, r)),
            }
        }
        out
    }

    /// The `t^ℓ` sequence: new-maximum entries at or after GST.
    pub fn t_ell(&self) -> Vec<(Time, Round)> {
        self.r_max_steps()
            .into_iter()
            .filter(|(t, _)| *t >= self.gst)
            .collect()
    }

    /// First instant some correct process is in `round`.
    pub fn first_entry(&self, round: Round) -> Option<Time> {
        self.entries
            .values()
            .flatten()
            .filter(|(_, r)| *r == round)
            .map(|(t, _)| *t)
            .min()
    }

    /// Time correct process `p` is first in a round `>= round`.
    pub fn reached(&self, p: ProcessId, round: Round) -> Option<Time> {
        self.entries[&p]
            .iter()
            .find(|(_, r)| *r >= round)
            .map(|(t, _)| *t)
    }

    fn correct_leader(&self, round: Round) -> Option<ProcessId> {
        let leader = self.schedule.leader(round);
        (!self.corrupt.contains(&leader)).then_some(leader)
    }
}

/// Every maximal-start synchronization time in the trace.
///
/// A sync starting at `a` needs the common round to persist past `a + Δ`:
/// either the next change comes strictly later, or the run covers `a + Δ`.
pub fn detect_sync_times(tl: &RoundTimeline) -> Vec<SyncTime> {
    let mut out = Vec::new();
    let times = tl.change_times();
    let mut cursor: BTreeMap<ProcessId, usize> = tl.entries.keys().map(|p| (*p, 0)).collect();
    for (i, &a) in times.iter().enumerate() {
        let mut common: Option<Round> = None;
        let mut equal = true;
        for (p, list) in &tl.entries {
            let c = cursor.get_mut(p).expect("every process has a cursor");
            while *c + 1 < list.len() && list[*c + 1].0 <= a {
                *c += 1;
            }
            let r = list[*c].1;
            match common {
                None => common = Some(r),
                Some(x) if x != r => equal = false,
                _ => {}
            }
        }
        let Some(r) = common.filter(|_| equal) else {
            continue;
        };
        let lasts = match times.get(i + 1) {
            Some(&b) => b > a + tl.cap_delta,
            None => tl.end >= a + tl.cap_delta,
        };
        if let (true, Some(leader)) = (lasts, tl.correct_leader(r)) {
            out.push(SyncTime {
                t: a,
                round: r,
                leader,
            });
        }
    }
    out
}

/// Reference implementation of [`detect_sync_times`]: checks the interval
/// condition directly at every entry instant. Quadratic, for tests.
pub fn detect_sync_times_brute(tl: &RoundTimeline) -> Vec<SyncTime> {
    let all: Vec<(ProcessId, Time, Round)> = tl
        .entries
        .iter()
        .flat_map(|(p, l)| l.iter().map(move |(t, r)| (*p, *t, *r)))
        .collect();
    let mut candidates: Vec<Time> = all.iter().map(|(_, t, _)| *t).collect();
    candidates.sort();
    candidates.dedup();
    let mut out = Vec::new();
    for a in candidates {
        if a + tl.cap_delta > tl.end {
            continue;
        }
        let rounds: BTreeSet<Round> = tl.entries.keys().map(|p| tl.round_at(*p, a)).collect();
        if rounds.len() != 1 {
            continue;
        }
        let r = *rounds.iter().next().expect("one round");
        // Nobody changes round during (a, a + Δ].
        if all.iter().any(|(_, t, _)| *t > a && *t <= a + tl.cap_delta) {
            continue;
        }
        if let Some(leader) = tl.correct_leader(r) {
            out.push(SyncTime {
                t: a,
                round: r,
                leader,
            });
        }
    }
    out
}
