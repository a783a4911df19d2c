//! Message counts, latency samples and their summary statistics.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::timeline::{detect_sync_times, RoundTimeline, SyncTime};
use crate::sim::{Trace, TraceEvent};
use crate::types::{ProcessId, Round, Time};

/// Sends by correct processes as `(time, count)`: a share to a relay counts
/// one, a certificate counts one per recipient.
pub fn correct_sends(trace: &Trace) -> Vec<(Time, u64)> {
    trace
        .records
        .iter()
        .filter_map(|rec| match &rec.ev {
            TraceEvent::Send { from, .. } if !trace.is_corrupt(*from) => Some((rec.t, 1)),
            TraceEvent::Broadcast { from, to, .. } if !trace.is_corrupt(*from) => {
                Some((rec.t, to.len() as u64))
            }
            _ => None,
        })
        .collect()
}

/// Messages sent by correct processes in `[s_i, s_{i+1})` for each pair of
/// consecutive sync times.
pub fn message_complexity(trace: &Trace, syncs: &[SyncTime]) -> Vec<u64> {
    let sends = correct_sends(trace);
    syncs
        .windows(2)
        .map(|w| {
            sends
                .iter()
                .filter(|(t, _)| *t >= w[0].t && *t < w[1].t)
                .map(|(_, c)| c)
                .sum()
        })
        .collect()
}

/// Stabilization samples: for each round that is `r_max(t)` for some
/// `t >= GST`, with `t0` its first correct entry, the delay from
/// `max(t0, GST)` until `f+1` correct processes are in it or a correct
/// process is in a higher round. Censored samples are dropped.
pub fn stabilization_samples(tl: &RoundTimeline, f: u32) -> Vec<Time> {
    let mut out = Vec::new();
    for (t0, r) in lemma_rounds(tl) {
        let start = t0.max(tl.gst);
        let mut times = tl.change_times();
        times.retain(|t| *t >= t0);
        let hit = times.into_iter().find(|&t| {
            let inside = tl.entries.keys().filter(|p| tl.round_at(**p, t) == r).count();
            inside > f as usize || tl.r_max_at(t) > r
        });
        if let Some(t1) = hit {
            out.push(t1.saturating_sub(start));
        }
    }
    out
}

/// Progress samples: for each such round `r`, with `t0` the instant the
/// `(f+1)`-th distinct correct process calls `advance()` while in `r` (and
/// `r` is still the maximum then), the delay from `max(t0, GST)` until a
/// correct process is in a round above `r`.
pub fn progress_samples(trace: &Trace, tl: &RoundTimeline, f: u32) -> Vec<Time> {
    let mut out = Vec::new();
    for (_, r) in lemma_rounds(tl) {
        let mut callers = BTreeSet::new();
        let t0 = trace.records.iter().find_map(|rec| match rec.ev {
            TraceEvent::Advance { p, curr } if curr == r && !trace.is_corrupt(p) => {
                callers.insert(p);
                (callers.len() > f as usize).then_some(rec.t)
            }
            _ => None,
        });
        let Some(t0) = t0 else { continue };
        if tl.r_max_at(t0) != r {
            continue;
        }
        let t1 = tl
            .entries
            .values()
            .flatten()
            .filter(|(t, rr)| *rr > r && *t >= t0)
            .map(|(t, _)| *t)
            .min();
        if let Some(t1) = t1 {
            out.push(t1 - t0.max(tl.gst));
        }
    }
    out
}

/// Rounds that are the maximum at some instant at or after GST, with the
/// first time a correct process entered each.
fn lemma_rounds(tl: &RoundTimeline) -> Vec<(Time, Round)> {
    let steps = tl.r_max_steps();
    let first_after = steps.partition_point(|(t, _)| *t < tl.gst);
    let from = if steps.get(first_after).is_some_and(|(t, _)| *t == tl.gst) {
        first_after
    } else {
        first_after.saturating_sub(1)
    };
    steps[from..].to_vec()
}

/// Gaps between consecutive `t^ℓ`.
pub fn e3_samples(tl: &RoundTimeline) -> Vec<Time> {
    tl.t_ell().windows(2).map(|w| w[1].0 - w[0].0).collect()
}

/// Delay from `s` to the next synchronization time at or after `s`. Any
/// instant inside a sync interval that still has `Δ` left is itself one.
pub fn next_sync_after(tl: &RoundTimeline, syncs: &[SyncTime], s: Time) -> Option<Time> {
    let times = tl.change_times();
    syncs.iter().find_map(|sy| {
        let end = times.iter().find(|t| **t > sy.t).map_or(tl.end + 1, |t| *t);
        let start = sy.t.max(s);
        // `start` is a sync time iff the interval outlasts `start + Δ`.
        (start + tl.cap_delta < end).then(|| start - s)
    })
}

/// E₁ and E₂ samples from `count` measurement instants drawn uniformly in
/// `[GST, end]` with a seeded generator.
pub fn e1_e2_samples(
    tl: &RoundTimeline,
    syncs: &[SyncTime],
    count: usize,
    seed: u64,
) -> (Vec<Time>, Vec<Time>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_ell = tl.t_ell();
    let (mut e1, mut e2) = (Vec::new(), Vec::new());
    if tl.end < tl.gst {
        return (e1, e2);
    }
    for _ in 0..count {
        let s = rng.random_range(tl.gst..=tl.end);
        if let Some(d) = next_sync_after(tl, syncs, s) {
            e1.push(d);
        }
        if let Some((t, _)) = t_ell.iter().find(|(t, _)| *t >= s) {
            e2.push(t - s);
        }
    }
    (e1, e2)
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub count: usize,
    pub mean: f64,
    pub std_err: f64,
    pub max: f64,
}

impl Estimate {
    pub fn from_samples<I: IntoIterator<Item = f64>>(samples: I) -> Option<Estimate> {
        let v: Vec<f64> = samples.into_iter().collect();
        let count = v.len();
        if count == 0 {
            return None;
        }
        let mean = v.iter().sum::<f64>() / count as f64;
        let std_err = if count > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            (var / count as f64).sqrt()
        } else {
            0.0
        };
        let max = v.iter().copied().fold(f64::MIN, f64::max);
        Some(Estimate {
            count,
            mean,
            std_err,
            max,
        })
    }

    /// True when the mean is within `k` standard errors above `bound`.
    pub fn within(&self, bound: f64, k: f64) -> bool {
        self.mean <= bound + k * self.std_err
    }
}

/// Everything measured on one trace.
#[derive(Clone, Debug, Serialize)]
pub struct SyncReport {
    pub seed: u64,
    pub n: u32,
    pub sync_times: Vec<SyncTime>,
    pub msg_counts: Vec<u64>,
    pub e1_samples: Vec<Time>,
    pub e2_samples: Vec<Time>,
    pub e3_samples: Vec<Time>,
    pub stabilization_samples: Vec<Time>,
    pub progress_samples: Vec<Time>,
}

/// Measurement instants drawn per trace for E₁ and E₂.
pub const MEASUREMENT_STARTS: usize = 16;

impl SyncReport {
    pub fn from_trace(trace: &Trace) -> SyncReport {
        let cfg = &trace.header.protocol;
        let tl = RoundTimeline::from_trace(trace);
        let sync_times = detect_sync_times(&tl);
        let msg_counts = message_complexity(trace, &sync_times);
        let (e1_samples, e2_samples) = e1_e2_samples(&tl, &sync_times, MEASUREMENT_STARTS, cfg.seed);
        SyncReport {
            seed: cfg.seed,
            n: cfg.n,
            msg_counts,
            e1_samples,
            e2_samples,
            e3_samples: e3_samples(&tl),
            stabilization_samples: stabilization_samples(&tl, cfg.f),
            progress_samples: progress_samples(trace, &tl, cfg.f),
            sync_times,
        }
    }

    /// Mean messages per sync interval divided by `n`.
    pub fn messages_per_sync_per_n(&self) -> Option<f64> {
        Estimate::from_samples(self.msg_counts.iter().map(|c| *c as f64 / self.n as f64)).map(|e| e.mean)
    }

    pub const SYNC_CSV_HEADER: &'static str = "seed,index,time,round,leader,messages_since_prev";

    /// One row per sync time; the message column is empty for the first.
    pub fn sync_csv_rows(&self, out: &mut String) {
        for (i, s) in self.sync_times.iter().enumerate() {
            let msgs = if i == 0 {
                String::new()
            } else {
                self.msg_counts[i - 1].to_string()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.seed, i, s.t, s.round, s.leader, msgs
            );
        }
    }

    pub const SAMPLE_CSV_HEADER: &'static str = "seed,metric,value";

    /// One row per latency sample.
    pub fn sample_csv_rows(&self, out: &mut String) {
        let groups: [(&str, &[Time]); 5] = [
            ("e1", &self.e1_samples),
            ("e2", &self.e2_samples),
            ("e3", &self.e3_samples),
            ("stabilization", &self.stabilization_samples),
            ("progress", &self.progress_samples),
        ];
        for (name, v) in groups {
            for x in v {
                let _ = writeln!(out, "{},{},{}", self.seed, name, x);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("insufficient data: {have} sync events, need at least {need}")]
    InsufficientData { have: usize, need: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyStats {
    pub e1: Option<Estimate>,
    pub e2: Option<Estimate>,
    pub e3: Option<Estimate>,
    pub stabilization: Option<Estimate>,
    pub progress: Option<Estimate>,
    pub messages_per_sync_per_n: Option<Estimate>,
}

/// Pools the samples of many reports.
pub fn latency_stats(reports: &[SyncReport]) -> Result<LatencyStats, StatsError> {
    let syncs: usize = reports.iter().map(|r| r.sync_times.len()).sum();
    if syncs < 2 {
        return Err(StatsError::InsufficientData { have: syncs, need: 2 });
    }
    let pool = |f: fn(&SyncReport) -> &Vec<Time>| {
        Estimate::from_samples(reports.iter().flat_map(f).map(|x| *x as f64))
    };
    Ok(LatencyStats {
        e1: pool(|r| &r.e1_samples),
        e2: pool(|r| &r.e2_samples),
        e3: pool(|r| &r.e3_samples),
        stabilization: pool(|r| &r.stabilization_samples),
        progress: pool(|r| &r.progress_samples),
        messages_per_sync_per_n: Estimate::from_samples(
            reports
                .iter()
                .flat_map(|r| r.msg_counts.iter().map(move |c| *c as f64 / r.n as f64)),
        ),
    })
}

/// Correct processes that enter round `r` by time `t` (start-up included).
pub fn entered_by(tl: &RoundTimeline, r: Round, t: Time) -> BTreeSet<ProcessId> {
    tl.entries
        .iter()
        .filter(|(_, l)| l.iter().any(|(et, er)| *er == r && *et <= t))
        .map(|(p, _)| *p)
        .collect()
}
