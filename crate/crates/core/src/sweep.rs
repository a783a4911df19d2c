//! Parallel multi-seed runs.
//!
//! Each seed is an independent run, so results do not depend on the number
//! of worker threads; they are always returned in seed order.

use rayon::prelude::*;
use rayon::ThreadPoolBuilder;

use crate::analysis::{check_all, SyncReport, Violation};
use crate::sim::{run, Scenario, SimError, Trace};

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub seed: u64,
    pub report: SyncReport,
    pub violations: Vec<Violation>,
    /// Kept only when requested.
    pub trace: Option<Trace>,
}

/// Runs `make(seed)` for every seed on `jobs` worker threads (0 means the
/// rayon default).
pub fn sweep<F>(seeds: &[u64], jobs: usize, keep_traces: bool, make: F) -> Result<Vec<SweepOutcome>, SimError>
where
    F: Fn(u64) -> Scenario + Sync,
{
    let pool = ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SimError::InvalidScenario(format!("thread pool: {e}")))?;
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let trace = run(&make(seed))?;
                Ok(SweepOutcome {
                    seed,
                    report: SyncReport::from_trace(&trace),
                    violations: check_all(&trace),
                    trace: keep_traces.then_some(trace),
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ProtocolConfig;

    fn make(seed: u64) -> Scenario {
        Scenario::new(ProtocolConfig::new(4, 1, 10, 50).with_seed(seed).with_gst(200)).until(1500)
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let seeds: Vec<u64> = (0..8).collect();
        let one = sweep(&seeds, 1, true, make).unwrap();
        let four = sweep(&seeds, 4, true, make).unwrap();
        assert_eq!(one.len(), 8);
        for (a, b) in one.iter().zip(&four) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(
                a.trace.as_ref().unwrap().to_jsonl(),
                b.trace.as_ref().unwrap().to_jsonl()
            );
            assert!(a.violations.is_empty());
        }
    }

    #[test]
    fn invalid_scenario_propagates() {
        let err = sweep(&[1], 1, false, |s| {
            Scenario::new(ProtocolConfig::new(3, 1, 10, 50).with_seed(s)).until(10)
        });
        assert!(err.is_err());
    }
}
