//! Acceptance suite: one check per criterion, one PASS/FAIL line each.
//!
//! Run with `cargo test -p relaysync --test acceptance`. Exits non-zero if
//! any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use relaysync::analysis::invariants::{p2_samples, s2_samples};
use relaysync::analysis::metrics::{correct_sends, message_complexity};
use relaysync::analysis::{
    check_safety, detect_sync_times, latency_stats, Estimate, RoundTimeline, SyncReport,
};
use relaysync::relay::{empirical_prefix_mean, expected_byzantine_prefix, prefix_pmf, RelaySchedule};
use relaysync::sim::{
    random_scenario, run, ByzantineStrategy, DelayPolicy, InFlight, InFlightPayload, InitialState,
    NetworkPolicy, Scenario, TargetPolicy, Trace, TraceEvent,
};
use relaysync::sweep::sweep;
use relaysync::types::{
    AdversaryMode, CertKind, MessageKind, Payload, ProcessId, ProtocolConfig, RelaySlot, Round, Time,
};

const DELTA: Time = 10;
const CAP_DELTA: Time = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn worst_case() -> NetworkPolicy {
    NetworkPolicy {
        pre_gst: DelayPolicy::Uniform,
        post_gst: DelayPolicy::Max,
    }
}

fn max_round(trace: &Trace) -> u64 {
    RoundTimeline::from_trace(trace)
        .r_max_steps()
        .last()
        .map_or(0, |(_, r)| r.0)
}

/// Oblivious corruption: `count` processes drawn with a generator that never
/// sees the relay seed.
fn oblivious_set(n: u32, count: u32, salt: u64) -> Vec<ProcessId> {
    let mut rng = ChaCha12Rng::seed_from_u64(salt ^ 0x00b1_1710_u64);
    let mut v: Vec<ProcessId> = sample(&mut rng, n as usize, count as usize)
        .into_iter()
        .map(|i| ProcessId(i as u32))
        .collect();
    v.sort();
    v
}

fn silent_or_selective(rng: &mut ChaCha12Rng) -> ByzantineStrategy {
    if rng.random_bool(0.5) {
        ByzantineStrategy::SilentRelay { participate: true }
    } else {
        ByzantineStrategy::SelectiveBroadcast {
            tc: TargetPolicy::RandomSubset,
            qc: TargetPolicy::RandomSubset,
            finalize_ack: TargetPolicy::RandomSubset,
            collude: true,
            participate: true,
        }
    }
}

/// Criterion 1.
fn safety_suite() -> Outcome {
    let sizes = [4u32, 7, 10, 13];
    let cases: Vec<(u32, u64)> = (0..500u64).map(|i| (sizes[(i % 4) as usize], i)).collect();
    let results: Vec<(u32, u64, usize, u64, Option<String>)> = cases
        .par_iter()
        .map(|&(n, seed)| {
            let f = (n - 1) / 3;
            let trace = run(&random_scenario(n, f, seed, 30)).expect("valid scenario");
            let v = check_safety(&trace);
            let first = v.first().map(|x| x.to_string());
            (n, seed, v.len(), max_round(&trace), first)
        })
        .collect();
    let violations: usize = results.iter().map(|r| r.2).sum();
    let min_rounds = results.iter().map(|r| r.3).min().unwrap_or(0);
    let first = results
        .iter()
        .find_map(|r| r.4.clone().map(|m| format!(" first: n={} seed={} {m}", r.0, r.1)));
    outcome(
        violations == 0 && min_rounds >= 20,
        format!(
            "{} scenarios, {violations} violations, fewest rounds reached {min_rounds}{}",
            results.len(),
            first.unwrap_or_default()
        ),
    )
}

/// S2 at its tight instance: one correct process is handed a QC at `t0`
/// while the others' pre-commits to the correct first relay are in flight.
fn s2_tight(seed: u64) -> (Vec<(Time, Time)>, usize) {
    let (n, f) = (4, 1);
    let r = Round(3);
    let cfg = ProtocolConfig::new(n, f, DELTA, CAP_DELTA).with_seed(seed);
    let relays = RelaySchedule::for_config(&cfg).relays(r);
    let (r1, r2) = (relays[0], relays[1]);
    let byz = r2;
    let correct: Vec<ProcessId> = (0..n).map(ProcessId).filter(|p| *p != byz).collect();
    let first = correct[0];
    let t0 = 100;
    let mut sc = Scenario::new(cfg)
        .with_network(NetworkPolicy {
            pre_gst: DelayPolicy::Max,
            post_gst: DelayPolicy::Max,
        })
        .with_byzantine(byz, ByzantineStrategy::SilentRelay { participate: false })
        .until(t0 + 10 * DELTA);
    for p in &correct {
        sc.initial.push(InitialState {
            process: *p,
            curr: Round(r.0 - 1),
            next: Some(r),
            finalized: true,
        });
    }
    // The signers of the early QC already pre-committed to the first relay.
    let signers = vec![correct[1], correct[2], byz];
    for s in &signers[..2] {
        sc.in_flight.push(InFlight {
            from: *s,
            to: r1,
            deliver_at: t0 + DELTA,
            payload: InFlightPayload::Share {
                kind: MessageKind::PreCommit,
                slot: RelaySlot::new(r, 1),
            },
        });
    }
    let mut signers = signers;
    signers.sort();
    sc.in_flight.push(InFlight {
        from: byz,
        to: first,
        deliver_at: t0,
        payload: InFlightPayload::Certificate {
            kind: CertKind::Qc,
            slot: RelaySlot::new(r, 2),
            signers,
        },
    });
    let trace = run(&sc).expect("valid scenario");
    let (samples, bad) = s2_samples(&trace);
    (
        samples
            .iter()
            .filter(|s| s.round == r)
            .map(|s| (s.t0, s.t2))
            .collect(),
        bad.len() + check_safety(&trace).len(),
    )
}

/// Criterion 2.
fn exact_timing() -> Outcome {
    let bound = 4 * DELTA;
    let mut s2_gaps = Vec::new();
    let mut bad = 0;
    for seed in 0..20 {
        let (samples, violations) = s2_tight(seed);
        bad += violations;
        s2_gaps.extend(samples.iter().map(|(t0, t2)| t2 - t0));
    }
    let mut p2_gaps = Vec::new();
    for (i, n) in [4u32, 7, 10, 13].into_iter().enumerate() {
        for seed in 0..10u64 {
            let f = (n - 1) / 3;
            let cfg = ProtocolConfig::new(n, f, DELTA, CAP_DELTA).with_seed(seed * 31 + i as u64);
            let sc = Scenario::new(cfg)
                .with_network(NetworkPolicy {
                    pre_gst: DelayPolicy::Max,
                    post_gst: DelayPolicy::Max,
                })
                .until(3000);
            let trace = run(&sc).expect("valid scenario");
            let (s2, v2) = s2_samples(&trace);
            let (p2, vp) = p2_samples(&trace);
            bad += v2.len() + vp.len();
            s2_gaps.extend(s2.iter().map(|s| s.t2 - s.t0));
            p2_gaps.extend(p2.iter().map(|s| s.t2 - s.t0));
        }
    }
    let s2_max = s2_gaps.iter().copied().max().unwrap_or(0);
    let p2_max = p2_gaps.iter().copied().max().unwrap_or(0);
    let pass = bad == 0 && !s2_gaps.is_empty() && !p2_gaps.is_empty() && s2_max == bound && p2_max == bound;
    outcome(
        pass,
        format!(
            "S2: {} instances, max t2-t0 = {s2_max}; P2: {} instances, max t2-t0 = {p2_max}; bound 4δ = {bound}; {bad} late processes",
            s2_gaps.len(),
            p2_gaps.len()
        ),
    )
}

/// Criterion 3.
fn prefix_expectation() -> Outcome {
    let three_halves = BigRational::new(3.into(), 2.into());
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for n in 1..=64u32 {
        for f in 0..n {
            if 3 * f >= n {
                break;
            }
            let closed = expected_byzantine_prefix(n, f).expect("valid params");
            let dist = prefix_pmf(n, f).expect("valid params");
            let mut total = BigRational::zero();
            let mut mean = BigRational::zero();
            for (i, p) in dist.pmf.iter().enumerate() {
                total += p;
                mean += p * BigRational::from_integer((i as u32 + 1).into());
            }
            if mean != closed || !total.is_one() || closed > three_halves {
                mismatches.push((n, f));
            }
            checked += 1;
        }
    }
    let corruption: BTreeSet<ProcessId> = [1, 4, 8].into_iter().map(ProcessId).collect();
    let mc = empirical_prefix_mean(2024, 10, 3, &corruption, 100_000).expect("valid sample");
    let target = expected_byzantine_prefix(10, 3).unwrap().to_f64().unwrap();
    let pass = mismatches.is_empty() && (mc - target).abs() <= 0.05 && target == 1.375;
    outcome(
        pass,
        format!(
            "{checked} (n,f) pairs exact, {} mismatches; Monte Carlo mean at (10,3) = {mc:.4} vs 11/8 = {target}",
            mismatches.len()
        ),
    )
}

fn lemma_scenario(n: u32, seed: u64) -> Scenario {
    let f = (n - 1) / 3;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    let gst = rng.random_range(0..=50 * DELTA);
    let cfg = ProtocolConfig::new(n, f, DELTA, CAP_DELTA)
        .with_seed(seed)
        .with_gst(gst);
    let mut sc = Scenario::new(cfg).with_network(worst_case());
    for p in oblivious_set(n, f, seed) {
        let strategy = silent_or_selective(&mut rng);
        sc = sc.with_byzantine(p, strategy);
    }
    sc.until(gst + 40 * (8 * DELTA + CAP_DELTA + 2 * f as u64 * DELTA))
}

/// Criterion 4.
fn expectation_lemmas() -> Outcome {
    let seeds: Vec<u64> = (0..1000).collect();
    let out = sweep(&seeds, 0, false, |s| lemma_scenario(10, s)).expect("valid scenarios");
    let reports: Vec<SyncReport> = out.into_iter().map(|o| o.report).collect();
    let stats = latency_stats(&reports).expect("enough syncs");
    let nine = 9.0 * DELTA as f64;
    let e3_bound = (22 * DELTA + CAP_DELTA) as f64;
    let (Some(stab), Some(prog), Some(e3)) = (stats.stabilization, stats.progress, stats.e3) else {
        return outcome(false, "missing samples".into());
    };
    let pass = stab.within(nine, 3.0) && prog.within(nine, 3.0) && e3.within(e3_bound, 3.0);
    outcome(
        pass,
        format!(
            "stabilization mean {:.2} (se {:.2}, n={}), progress mean {:.2} (se {:.2}, n={}) vs 9δ = {nine}; E3 mean {:.2} (se {:.2}, n={}) vs 22δ+Δ = {e3_bound}",
            stab.mean, stab.std_err, stab.count, prog.mean, prog.std_err, prog.count, e3.mean, e3.std_err, e3.count
        ),
    )
}

fn linear_scenario(n: u32, seed: u64) -> Scenario {
    let f = (n - 1) / 3;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x11ea7);
    let cfg = ProtocolConfig::new(n, f, DELTA, CAP_DELTA).with_seed(seed * 1_000 + n as u64);
    let mut sc = Scenario::new(cfg).with_network(worst_case());
    for p in oblivious_set(n, f, seed * 1_000 + n as u64) {
        let strategy = silent_or_selective(&mut rng);
        sc = sc.with_byzantine(p, strategy);
    }
    sc.stop_after_syncs(30)
}

fn messages_per_sync_per_n(reports: &[SyncReport]) -> Option<Estimate> {
    Estimate::from_samples(
        reports
            .iter()
            .flat_map(|r| r.msg_counts.iter().map(move |c| *c as f64 / r.n as f64)),
    )
}

/// Criterion 5.
fn linear_messages() -> Outcome {
    let sizes = [4u32, 7, 13, 25, 49];
    let mut ratios = Vec::new();
    for n in sizes {
        let seeds: Vec<u64> = (0..20).collect();
        let out = sweep(&seeds, 0, false, |s| linear_scenario(n, s)).expect("valid scenarios");
        let reports: Vec<SyncReport> = out.into_iter().map(|o| o.report).collect();
        match messages_per_sync_per_n(&reports) {
            Some(e) => ratios.push((n, e.mean)),
            None => return outcome(false, format!("no sync intervals at n={n}")),
        }
    }
    let max = ratios.iter().map(|r| r.1).fold(f64::MIN, f64::max);
    let min = ratios.iter().map(|r| r.1).fold(f64::MAX, f64::min);
    let table: Vec<String> = ratios.iter().map(|(n, r)| format!("n={n}: {r:.2}")).collect();
    outcome(
        max / min <= 2.0,
        format!("messages/sync/n {}; max/min = {:.3}", table.join(", "), max / min),
    )
}

/// Criterion 6.
fn selective_broadcast_example() -> Outcome {
    let (n, f) = (4, 1);
    let r = Round(2);
    let seed = 7;
    let cfg = ProtocolConfig::new(n, f, DELTA, CAP_DELTA).with_seed(seed);
    let relays = RelaySchedule::for_config(&cfg).relays(r);
    let byz = relays[0];
    let correct: Vec<ProcessId> = (0..n).map(ProcessId).filter(|p| *p != byz).collect();
    // P: f+1 correct processes in round r-1; the other f lag behind.
    let (pset, lagging) = correct.split_at(f as usize + 1);
    let chosen = pset[0];
    let mut sc = Scenario::new(cfg)
        .with_network(NetworkPolicy {
            pre_gst: DelayPolicy::Max,
            post_gst: DelayPolicy::Max,
        })
        .with_byzantine(
            byz,
            ByzantineStrategy::SelectiveBroadcast {
                tc: TargetPolicy::Only {
                    processes: pset.to_vec(),
                },
                qc: TargetPolicy::Only {
                    processes: vec![chosen],
                },
                finalize_ack: TargetPolicy::All,
                collude: true,
                participate: false,
            },
        )
        .until(1500);
    for p in pset {
        sc.initial.push(InitialState {
            process: *p,
            curr: Round(r.0 - 1),
            next: None,
            finalized: true,
        });
    }
    let trace = run(&sc).expect("valid scenario");

    let correct_set: BTreeSet<ProcessId> = correct.iter().copied().collect();
    let mut entries: Vec<(Time, ProcessId)> = trace
        .records
        .iter()
        .filter_map(|rec| match rec.ev {
            TraceEvent::Enter { p, round } if round == r && correct_set.contains(&p) => Some((rec.t, p)),
            _ => None,
        })
        .collect();
    entries.sort();
    let qc1_receivers: BTreeSet<ProcessId> = trace
        .records
        .iter()
        .filter_map(|rec| match &rec.ev {
            TraceEvent::Deliver {
                to,
                payload: Payload::Certificate(c),
                ..
            } if c.kind == CertKind::Qc && c.slot == RelaySlot::new(r, 1) => Some(*to),
            _ => None,
        })
        .filter(|p| correct_set.contains(p))
        .collect();
    let alone = entries.first().map(|e| e.1) == Some(chosen)
        && qc1_receivers == BTreeSet::from([chosen])
        && entries.get(1).is_some_and(|e| e.0 > entries[0].0 + 2 * DELTA);

    let entered: BTreeSet<ProcessId> = entries.iter().map(|e| e.1).collect();
    let lagging_entered = lagging.iter().all(|p| entered.contains(p)) && entered == correct_set;

    // After its finalize-ack, a process sends no more pre-commits for r.
    let mut finalized_at: Vec<Option<Time>> = vec![None; n as usize];
    let mut late_resends = 0;
    let mut helped = false;
    for rec in &trace.records {
        match &rec.ev {
            TraceEvent::Finalized { p, round } if *round == r => {
                finalized_at[p.index()].get_or_insert(rec.t);
            }
            TraceEvent::Send { from, msg, .. }
                if msg.kind == MessageKind::PreCommit && msg.slot.round == r =>
            {
                if finalized_at[from.index()].is_some() {
                    late_resends += 1;
                }
                if *from == chosen && msg.slot.k > 1 {
                    helped = true;
                }
            }
            _ => {}
        }
    }
    let any_finalized = correct.iter().any(|p| finalized_at[p.index()].is_some());
    let safe = check_safety(&trace).is_empty();
    outcome(
        alone && lagging_entered && any_finalized && late_resends == 0 && helped && safe,
        format!(
            "first entrant alone: {alone} (QC(r,1) reached {} correct), all lagging entered: {lagging_entered}, entrant kept pre-committing: {helped}, pre-commits after finalize-ack: {late_resends}",
            qc1_receivers.len()
        ),
    )
}

/// Criterion 7.
fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("relaysync-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let seeds: Vec<u64> = (0..12).collect();
    let make = |s| random_scenario(7, 2, s, 15);
    let mut identical = true;
    let mut files = 0;
    let mut reference: Vec<Vec<u8>> = Vec::new();
    for (round, jobs) in [(0, 1usize), (1, 1), (2, 2), (3, 4)] {
        let out = sweep(&seeds, jobs, true, make).expect("valid scenarios");
        for (i, o) in out.iter().enumerate() {
            let path = dir.join(format!("run{round}-seed{}.jsonl", o.seed));
            let file = std::fs::File::create(&path).expect("create trace file");
            o.trace
                .as_ref()
                .expect("kept")
                .write_jsonl(std::io::BufWriter::new(file))
                .expect("write trace");
            let bytes = std::fs::read(&path).expect("read back");
            files += 1;
            if round == 0 {
                reference.push(bytes);
            } else if reference[i] != bytes {
                identical = false;
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    outcome(
        identical,
        format!(
            "{files} trace files over 2 repeated runs and 1/2/4 worker threads, byte-identical: {identical}"
        ),
    )
}

/// Criterion 8.
fn strong_static() -> Outcome {
    let (n, f) = (13u32, 4u32);
    let target = Round(6);
    let seed = 99;
    let base = ProtocolConfig::new(n, f, DELTA, CAP_DELTA).with_seed(seed);
    let relays = RelaySchedule::for_config(&base).relays(target);
    let corrupt: Vec<ProcessId> = relays[..f as usize].to_vec();
    let mut cfg = base.clone();
    cfg.adversary_mode = AdversaryMode::StrongStatic;
    let network = NetworkPolicy {
        pre_gst: DelayPolicy::Max,
        post_gst: DelayPolicy::Max,
    };
    let attacked = {
        let mut sc = Scenario::new(cfg).with_network(network);
        for p in &corrupt {
            sc = sc.with_byzantine(*p, ByzantineStrategy::SilentRelay { participate: true });
        }
        sc.until(40_000)
    };
    let clean = Scenario::new(base).with_network(network).until(40_000);
    let ta = run(&attacked).expect("valid scenario");
    let tc = run(&clean).expect("valid scenario");

    // Delay from the (f+1)-th advance in the previous round to the first
    // correct entry into the target round.
    let progress_gap = |trace: &Trace| -> Option<Time> {
        let prev = Round(target.0 - 1);
        let t0 = trace
            .records
            .iter()
            .filter(|r| matches!(&r.ev, TraceEvent::Advance { p, curr } if *curr == prev && !trace.is_corrupt(*p)))
            .nth(f as usize)?
            .t;
        let first = RoundTimeline::from_trace(trace).first_entry(target)?;
        Some(first - t0)
    };
    let (Some(ga), Some(gc)) = (progress_gap(&ta), progress_gap(&tc)) else {
        return outcome(false, "target round not reached under both runs".into());
    };
    let extra = ga.saturating_sub(gc);

    let tl = RoundTimeline::from_trace(&ta);
    let syncs = detect_sync_times(&tl);
    let counts = message_complexity(&ta, &syncs);
    let idx = syncs.iter().position(|s| s.round == target);
    let msgs_target = match idx {
        Some(i) if i > 0 => counts[i - 1],
        _ => {
            // No sync in the target round itself: count its whole span.
            let start = tl.first_entry(Round(target.0 - 1)).unwrap_or(0);
            let end = tl.first_entry(target.next()).unwrap_or(ta.end);
            correct_sends(&ta)
                .iter()
                .filter(|(t, _)| *t >= start && *t < end)
                .map(|(_, c)| c)
                .sum()
        }
    };

    let rounds = max_round(&ta);
    let report = SyncReport::from_trace(&ta);
    let stats = latency_stats(std::slice::from_ref(&report)).expect("enough syncs");
    let oblivious: Vec<SyncReport> = (0..10)
        .into_par_iter()
        .map(|s| SyncReport::from_trace(&run(&linear_scenario(n, s)).expect("valid scenario")))
        .collect();
    let m_attacked = messages_per_sync_per_n(std::slice::from_ref(&report)).map_or(f64::MAX, |e| e.mean);
    let m_oblivious = messages_per_sync_per_n(&oblivious).map_or(f64::MIN_POSITIVE, |e| e.mean);
    let msg_ratio = m_attacked.max(m_oblivious) / m_attacked.min(m_oblivious);
    let nine = 9.0 * DELTA as f64;
    let e3_bound = (22 * DELTA + CAP_DELTA) as f64;
    let averages_ok = stats.e3.is_some_and(|e| e.within(e3_bound, 3.0))
        && stats.progress.is_some_and(|e| e.within(nine, 3.0))
        && stats.stabilization.is_some_and(|e| e.within(nine, 3.0))
        && msg_ratio <= 2.0;
    let pass =
        extra >= 2 * f as u64 * DELTA && msgs_target >= (f * (n - f)) as u64 && rounds >= 200 && averages_ok;
    outcome(
        pass,
        format!(
            "extra time {extra} (need >= 2fδ = {}), messages {msgs_target} (need >= f(n-f) = {}), {rounds} rounds, E3 mean {:.1}, progress mean {:.1}, messages/sync/n {m_attacked:.2} vs oblivious {m_oblivious:.2}",
            2 * f as u64 * DELTA,
            f * (n - f),
            stats.e3.map_or(f64::NAN, |e| e.mean),
            stats.progress.map_or(f64::NAN, |e| e.mean),
        ),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "safety property suite", Duration::from_secs(120), safety_suite),
        (2, "S2/P2 exact timing", Duration::from_secs(60), exact_timing),
        (
            3,
            "E[X] exact and sampled",
            Duration::from_secs(30),
            prefix_expectation,
        ),
        (
            4,
            "expectation lemmas",
            Duration::from_secs(300),
            expectation_lemmas,
        ),
        (
            5,
            "linear message complexity",
            Duration::from_secs(300),
            linear_messages,
        ),
        (
            6,
            "selective-broadcast example",
            Duration::from_secs(60),
            selective_broadcast_example,
        ),
        (7, "determinism", Duration::from_secs(60), determinism),
        (
            8,
            "strong static adversary",
            Duration::from_secs(300),
            strong_static,
        ),
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let pass = out.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id} ({name}): {} in {:.1}s (budget {}s). {}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            out.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
