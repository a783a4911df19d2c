//! Local timer and leader functions layered over the synchronizer.
//!
//! The timer asks the synchronizer to advance `c1 + Δ` after the most
//! recent round entry (or after start-up, which counts as entering the
//! initial round). The leader function maps each entered round `r` to
//! `Relay(r, 1)`.

use thiserror::Error;

use crate::relay::RelaySchedule;
use crate::types::{ProcessId, ProtocolConfig, Round, Time};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacemakerError {
    #[error("round {got} proposed after round {last}: rounds must strictly increase")]
    MonotonicityViolation { last: Round, got: Round },
}

/// Output consumed by an SMR engine: enter `round`, led by `leader`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NewLeader {
    pub round: Round,
    pub leader: ProcessId,
}

#[derive(Clone, Debug)]
pub struct Pacemaker {
    schedule: RelaySchedule,
    last_propose_time: Time,
    last_round: Round,
    c1: Time,
    cap_delta: Time,
    fired: bool,
}

impl Pacemaker {
    /// Start-up is treated as entering `initial_round` at `start`.
    pub fn start(cfg: &ProtocolConfig, initial_round: Round, start: Time) -> Self {
        Pacemaker {
            schedule: RelaySchedule::for_config(cfg),
            last_propose_time: start,
            last_round: initial_round,
            c1: cfg.c1(),
            cap_delta: cfg.cap_delta,
            fired: false,
        }
    }

    pub fn last_round(&self) -> Round {
        self.last_round
    }

    pub fn last_propose_time(&self) -> Time {
        self.last_propose_time
    }

    /// Time of the next `advance()`, if one is still owed.
    pub fn deadline(&self) -> Option<Time> {
        (!self.fired).then(|| self.last_propose_time + self.c1 + self.cap_delta)
    }

    pub fn on_propose_round(&mut self, round: Round, now: Time) -> Result<NewLeader, PacemakerError> {
        if round <= self.last_round {
            return Err(PacemakerError::MonotonicityViolation {
                last: self.last_round,
                got: round,
            });
        }
        self.last_round = round;
        self.last_propose_time = now;
        self.fired = false;
        Ok(NewLeader {
            round,
            leader: self.schedule.leader(round),
        })
    }

    /// True exactly once per round entry, at the deadline.
    pub fn on_tick(&mut self, now: Time) -> bool {
        match self.deadline() {
            Some(d) if now == d => {
                self.fired = true;
                true
            }
            _ => false,
        }
    }
}
