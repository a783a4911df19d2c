//! Relay-based Byzantine round synchronization: the synchronizer and
//! pacemaker state machines, a deterministic simulator, and trace analysis.

pub mod analysis;
pub mod crypto;
pub mod pacemaker;
pub mod relay;
pub mod sim;
pub mod sweep;
pub mod synchronizer;
pub mod types;
