//! Append-only annotation events.
//!
//! One JSON object per line:
//! `{"timestamp":…,"actor":…,"action":…,"payload":{…},"objects_affected":…}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::NodeId;
use crate::lifecycle::{ClusterId, PageVerdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    /// UTC seconds since the Unix epoch, non-decreasing within a log.
    pub timestamp: f64,
    pub actor: String,
    #[serde(flatten)]
    pub body: EventBody,
    pub objects_affected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    ProjectCreated {
        features: String,
        labels: Option<String>,
        schedule: Vec<usize>,
        k: usize,
        object_count: usize,
    },
    /// Clustering result for one schedule step; seeds hold object ids.
    IterationStarted {
        iteration: usize,
        m: usize,
        seeds: Vec<Vec<String>>,
    },
    ClusterApproved {
        cluster: ClusterId,
    },
    /// Approved and flagged for preferred growth.
    ClusterFlagged {
        cluster: ClusterId,
    },
    ClusterRejected {
        cluster: ClusterId,
    },
    GrowOpened {
        session: u64,
        cluster: ClusterId,
    },
    PageVerdict {
        session: u64,
        page: usize,
        verdict: PageVerdict,
    },
    CandidateRemoved {
        session: u64,
        object: String,
    },
    CandidateAccepted {
        session: u64,
        object: String,
    },
    GrowCommitted {
        session: u64,
        cluster: ClusterId,
        added: usize,
    },
    TreeBuilt {
        leaves: usize,
    },
    NodeMerged {
        into: NodeId,
        from: NodeId,
    },
    NodeMoved {
        node: NodeId,
        parent: NodeId,
    },
    NodeNamed {
        node: NodeId,
        name: String,
    },
}

/// Coarse phase of an action, used for throughput accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Setup,
    Validation,
    Growth,
    Naming,
}

impl EventBody {
    pub fn action(&self) -> &'static str {
        match self {
            EventBody::ProjectCreated { .. } => "project_created",
            EventBody::IterationStarted { .. } => "iteration_started",
            EventBody::ClusterApproved { .. } => "cluster_approved",
            EventBody::ClusterFlagged { .. } => "cluster_flagged",
            EventBody::ClusterRejected { .. } => "cluster_rejected",
            EventBody::GrowOpened { .. } => "grow_opened",
            EventBody::PageVerdict { .. } => "page_verdict",
            EventBody::CandidateRemoved { .. } => "candidate_removed",
            EventBody::CandidateAccepted { .. } => "candidate_accepted",
            EventBody::GrowCommitted { .. } => "grow_committed",
            EventBody::TreeBuilt { .. } => "tree_built",
            EventBody::NodeMerged { .. } => "node_merged",
            EventBody::NodeMoved { .. } => "node_moved",
            EventBody::NodeNamed { .. } => "node_named",
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            EventBody::ProjectCreated { .. } | EventBody::IterationStarted { .. } => Phase::Setup,
            EventBody::ClusterApproved { .. } | EventBody::ClusterFlagged { .. } | EventBody::ClusterRejected { .. } => {
                Phase::Validation
            }
            EventBody::GrowOpened { .. }
            | EventBody::PageVerdict { .. }
            | EventBody::CandidateRemoved { .. }
            | EventBody::CandidateAccepted { .. }
            | EventBody::GrowCommitted { .. } => Phase::Growth,
            EventBody::TreeBuilt { .. }
            | EventBody::NodeMerged { .. }
            | EventBody::NodeMoved { .. }
            | EventBody::NodeNamed { .. } => Phase::Naming,
        }
    }

    /// Whether `objects_affected` counts as sorted objects: approvals and
    /// growth commits.
    pub fn counts_as_sorted(&self) -> bool {
        matches!(
            self,
            EventBody::ClusterApproved { .. } | EventBody::ClusterFlagged { .. } | EventBody::GrowCommitted { .. }
        )
    }
}

pub fn write_jsonl<W: Write>(mut writer: W, events: &[AnnotationEvent]) -> Result<()> {
    for e in events {
        append_jsonl(&mut writer, e)?;
    }
    Ok(())
}

pub fn append_jsonl<W: Write>(mut writer: W, event: &AnnotationEvent) -> Result<()> {
    let line = serde_json::to_string(event).map_err(|e| Error::Format(e.to_string()))?;
    writer.write_all(line.as_bytes())?;
    writer.write_all(b"\n")?;
    Ok(())
}

/// Reads a JSON-lines log. Blank lines are skipped; a malformed final line
/// (torn write) is dropped, a malformed line elsewhere is an error.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<AnnotationEvent>> {
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut events = Vec::with_capacity(lines.len());
    for (no, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => events.push(e),
            Err(_) if Some(no) == last => break,
            Err(e) => return Err(Error::Format(format!("event log line {}: {e}", no + 1))),
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let e = AnnotationEvent {
            timestamp: 12.5,
            actor: "ann".into(),
            body: EventBody::PageVerdict { session: 3, page: 7, verdict: PageVerdict::NoMatch },
            objects_affected: 0,
        };
        let s = serde_json::to_string(&e).unwrap();
        assert_eq!(
            s,
            r#"{"timestamp":12.5,"actor":"ann","action":"page_verdict","payload":{"session":3,"page":7,"verdict":"no_match"},"objects_affected":0}"#
        );
        let back: AnnotationEvent = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn torn_last_line_is_dropped() {
        let e = AnnotationEvent {
            timestamp: 1.0,
            actor: "a".into(),
            body: EventBody::ClusterApproved { cluster: ClusterId(4) },
            objects_affected: 10,
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[e.clone(), e.clone()]).unwrap();
        buf.extend_from_slice(b"{\"timestamp\":2.0,\"act");
        assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![e.clone(), e.clone()]);

        let mut bad = b"garbage\n".to_vec();
        write_jsonl(&mut bad, &[e]).unwrap();
        assert!(read_jsonl(&bad[..]).is_err());
    }
}
