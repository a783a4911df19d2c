//! Trace post-processing: synchronization times, latency and message
//! statistics, and invariant checks.

pub mod invariants;
pub mod metrics;
pub mod timeline;

pub use invariants::{check_all, check_safety, Violation};
pub use metrics::{latency_stats, Estimate, LatencyStats, StatsError, SyncReport};
pub use timeline::{detect_sync_times, detect_sync_times_brute, RoundTimeline, SyncTime};
