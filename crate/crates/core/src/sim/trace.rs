//! Line-delimited trace records.
//!
//! A trace file holds one JSON object per line: the header, then one record
//! per event in processing order, then an end marker. Field order is fixed
//! by the struct definitions, so equal traces serialize to equal bytes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synchronizer::TimerKey;
use crate::types::{Certificate, Message, Payload, ProcessId, ProtocolConfig, Round, Time};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    Init {
        p: ProcessId,
        curr: Round,
        next: Round,
        finalized: bool,
        byzantine: bool,
    },
    /// A payload injected by the scenario as already in flight at start.
    Preload {
        from: ProcessId,
        to: ProcessId,
        payload: Payload,
    },
    Send {
        from: ProcessId,
        to: ProcessId,
        msg: Message,
    },
    Broadcast {
        from: ProcessId,
        to: Vec<ProcessId>,
        cert: Certificate,
    },
    Deliver {
        from: ProcessId,
        to: ProcessId,
        payload: Payload,
    },
    /// The pacemaker invoked `advance()`; `curr` is the caller's round.
    Advance {
        p: ProcessId,
        curr: Round,
    },
    Enter {
        p: ProcessId,
        round: Round,
    },
    NewLeader {
        p: ProcessId,
        round: Round,
        leader: ProcessId,
    },
    Timeout {
        p: ProcessId,
        key: TimerKey,
    },
    Finalized {
        p: ProcessId,
        round: Round,
    },
    /// An input dropped by validation or an adversary action refused by the
    /// possession ledger.
    Rejected {
        p: ProcessId,
        reason: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Time,
    #[serde(flatten)]
    pub ev: TraceEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub protocol: ProtocolConfig,
    pub corrupt: Vec<ProcessId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndLine {
    end: Time,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    /// Last instant covered by the run.
    pub end: Time,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("trace is missing its {0} line")]
    Missing(&'static str),
}

impl Trace {
    pub fn is_corrupt(&self, p: ProcessId) -> bool {
        self.header.corrupt.binary_search(&p).is_ok()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let to_io = |e: serde_json::Error| TraceError::Io(e.into());
        serde_json::to_writer(&mut w, &self.header).map_err(to_io)?;
        w.write_all(b"\n")?;
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec).map_err(to_io)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &EndLine { end: self.end }).map_err(to_io)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        let parse_err = |line: usize| move |source| TraceError::Parse { line, source };
        let first = lines.first().ok_or(TraceError::Missing("header"))?;
        let header: TraceHeader = serde_json::from_str(first).map_err(parse_err(1))?;
        if lines.len() < 2 {
            return Err(TraceError::Missing("end"));
        }
        let last = lines.len() - 1;
        let end: EndLine = serde_json::from_str(&lines[last]).map_err(parse_err(last + 1))?;
        let mut records = Vec::with_capacity(last.saturating_sub(1));
        for (i, line) in lines[1..last].iter().enumerate() {
            records.push(serde_json::from_str(line).map_err(parse_err(i + 2))?);
        }
        Ok(Trace {
            header,
            records,
            end: end.end,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ThresholdScheme;
    use crate::types::{MessageKind, RelaySlot};

    fn sample() -> Trace {
        let cfg = ProtocolConfig::new(4, 1, 10, 50);
        let scheme = ThresholdScheme::new(&cfg);
        let slot = RelaySlot::new(1, 1);
        let msg = Message {
            kind: MessageKind::PreCommit,
            slot,
            sender: ProcessId(2),
            share: scheme.share(ProcessId(2), MessageKind::PreCommit, slot),
        };
        Trace {
            header: TraceHeader {
                protocol: cfg,
                corrupt: vec![ProcessId(3)],
            },
            records: vec![
                TraceRecord {
                    t: 0,
                    ev: TraceEvent::Init {
                        p: ProcessId(0),
                        curr: Round(0),
                        next: Round(0),
                        finalized: true,
                        byzantine: false,
                    },
                },
                TraceRecord {
                    t: 90,
                    ev: TraceEvent::Send {
                        from: ProcessId(2),
                        to: ProcessId(1),
                        msg: msg.clone(),
                    },
                },
                TraceRecord {
                    t: 95,
                    ev: TraceEvent::Deliver {
                        from: ProcessId(2),
                        to: ProcessId(1),
                        payload: Payload::Message(msg),
                    },
                },
                TraceRecord {
                    t: 110,
                    ev: TraceEvent::Timeout {
                        p: ProcessId(2),
                        key: TimerKey::Advance(Round(1)),
                    },
                },
            ],
            end: 200,
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let trace = sample();
        let text = trace.to_jsonl();
        assert_eq!(text.lines().count(), trace.records.len() + 2);
        let back = Trace::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, trace);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn record_lines_lead_with_time_and_kind() {
        let text = sample().to_jsonl();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with(r#"{"t":0,"ev":"init","p":0"#), "{line}");
    }

    #[test]
    fn truncated_trace_is_rejected() {
        let text = sample().to_jsonl();
        let header_only = text.lines().next().unwrap();
        assert!(matches!(
            Trace::read_jsonl(header_only.as_bytes()),
            Err(TraceError::Missing("end"))
        ));
        assert!(matches!(
            Trace::read_jsonl("".as_bytes()),
            Err(TraceError::Missing("header"))
        ));
    }
}
