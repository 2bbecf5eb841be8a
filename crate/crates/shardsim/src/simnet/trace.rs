//! Ordered event log of a run: JSON-lines serialization, a content digest
//! for replay comparison, and tamper checking.

use crate::crypto::Digest32;
use crate::ids::ActorId;
use crate::time::SimTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// How much a run records. `Protocol` captures deliveries and protocol
/// milestones; `Full` adds sends, timer fires and payload digests.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Default, Serialize, Deserialize)]
pub enum TraceLevel {
    Off,
    #[default]
    Protocol,
    Full,
}

/// One observed event. `detail` is a short deterministic rendering of the
/// payload; `digest` is present at `Full` level for wire payloads.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: SimTime,
    pub actor: ActorId,
    pub kind: String,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub digest: Option<Digest32>,
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum TraceError {
    #[error("malformed trace line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("trace invariant violated: {0}")]
    Violation(String),
}

/// Header line of the JSON-lines encoding; binds a trace to the seed that
/// produced it.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
struct TraceHeader {
    master_seed: u64,
    level: TraceLevel,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
struct TraceFooter {
    records: usize,
    digest: Digest32,
}

#[derive(Clone, PartialEq, Debug)]
pub struct Trace {
    pub master_seed: u64,
    pub level: TraceLevel,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(master_seed: u64, level: TraceLevel) -> Self {
        Trace {
            master_seed,
            level,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// Digest over the record lines alone, independent of header and
    /// footer framing.
    pub fn digest(&self) -> Digest32 {
        let mut hasher = Sha256::new();
        for r in &self.records {
            hasher.update(serde_json::to_vec(r).expect("serializable"));
            hasher.update(b"\n");
        }
        Digest32(hasher.finalize().into())
    }

    /// JSON lines: one header, one line per record, one footer carrying the
    /// record count and digest.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = TraceHeader {
            master_seed: self.master_seed,
            level: self.level,
        };
        out.push_str(&serde_json::to_string(&header).expect("serializable"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        let footer = TraceFooter {
            records: self.records.len(),
            digest: self.digest(),
        };
        out.push_str(&serde_json::to_string(&footer).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(TraceError::Malformed {
            line: 1,
            reason: "empty file".into(),
        })?;
        let header: TraceHeader =
            serde_json::from_str(first).map_err(|e| TraceError::Malformed {
                line: 1,
                reason: format!("bad header: {e}"),
            })?;
        let mut records = Vec::new();
        let mut footer: Option<TraceFooter> = None;
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if footer.is_some() {
                return Err(TraceError::Malformed {
                    line: i + 1,
                    reason: "content after footer".into(),
                });
            }
            if let Ok(f) = serde_json::from_str::<TraceFooter>(line) {
                footer = Some(f);
                continue;
            }
            let record: TraceRecord =
                serde_json::from_str(line).map_err(|e| TraceError::Malformed {
                    line: i + 1,
                    reason: format!("bad record: {e}"),
                })?;
            records.push(record);
        }
        let footer = footer.ok_or(TraceError::Malformed {
            line: 0,
            reason: "missing footer".into(),
        })?;
        let trace = Trace {
            master_seed: header.master_seed,
            level: header.level,
            records,
        };
        if footer.records != trace.records.len() {
            return Err(TraceError::Violation(format!(
                "record count: footer says {}, found {}",
                footer.records,
                trace.records.len()
            )));
        }
        if footer.digest != trace.digest() {
            return Err(TraceError::Violation("content digest mismatch".into()));
        }
        Ok(trace)
    }

    /// Structural invariants beyond framing: event times never decrease.
    pub fn verify(&self) -> Result<(), TraceError> {
        let mut last = SimTime::ZERO;
        for (i, r) in self.records.iter().enumerate() {
            if r.at < last {
                return Err(TraceError::Violation(format!(
                    "time went backwards at record {i}: {} after {}",
                    r.at.nanos(),
                    last.nanos()
                )));
            }
            last = r.at;
        }
        Ok(())
    }
}

/// Short deterministic digest prefix for rendering payloads in `detail`
/// fields.
pub fn short_digest(d: &Digest32) -> String {
    let hex = d.to_hex();
    hex[..12].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::NodeId;

    fn record(ns: u64, kind: &str) -> TraceRecord {
        TraceRecord {
            at: SimTime::from_nanos(ns),
            actor: ActorId::Node(NodeId(1)),
            kind: kind.into(),
            detail: "x".into(),
            digest: None,
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let mut t = Trace::new(42, TraceLevel::Protocol);
        t.push(record(10, "deliver:prepare"));
        t.push(record(20, "exec"));
        let text = t.to_jsonl();
        let back = Trace::from_jsonl(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.digest(), t.digest());
    }

    #[test]
    fn tampered_record_is_detected() {
        let mut t = Trace::new(42, TraceLevel::Protocol);
        t.push(record(10, "deliver:prepare"));
        t.push(record(20, "exec"));
        let tampered = t.to_jsonl().replace("exec", "Exec");
        match Trace::from_jsonl(&tampered) {
            Err(TraceError::Violation(v)) => assert!(v.contains("digest")),
            other => panic!("expected digest violation, got {other:?}"),
        }
    }

    #[test]
    fn truncated_trace_is_detected() {
        let mut t = Trace::new(42, TraceLevel::Protocol);
        t.push(record(10, "a"));
        t.push(record(20, "b"));
        let full = t.to_jsonl();
        let mut lines: Vec<&str> = full.lines().collect();
        lines.remove(1);
        let truncated = lines.join("\n");
        assert!(Trace::from_jsonl(&truncated).is_err());
    }

    #[test]
    fn backwards_time_fails_verification() {
        let mut t = Trace::new(1, TraceLevel::Protocol);
        t.push(record(20, "a"));
        t.push(record(10, "b"));
        assert!(matches!(t.verify(), Err(TraceError::Violation(_))));
    }
}
