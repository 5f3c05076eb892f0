//! Partial ground truth: acknowledged-scanner labels loaded from file, the
//! Mirai packet fingerprint, and majority-vote cluster labels with purity.
//!
//! Everything unlisted is "Unknown", and Unknown takes part in majority
//! voting like any other label, so a cluster of unlisted senders is labeled
//! Unknown with purity 1.

use std::collections::{BTreeMap, HashMap};
use std::collections::BTreeSet;
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::path::Path;

use crate::ingest::{DailyBatch, PacketRecord, Protocol};

/// Reserved label for senders with no ground-truth entry.
pub const UNKNOWN_LABEL: &str = "Unknown";

/// Label applied by the packet fingerprint.
pub const MIRAI_LABEL: &str = "Mirai-like";

pub const GT_HEADER: &str = "sender_ip,label";

#[derive(Debug, thiserror::Error)]
pub enum GtError {
    #[error("cannot read ground truth: {0}")]
    Io(#[from] std::io::Error),
    #[error("ground truth line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("conflicting ground-truth labels: {0}")]
    Conflicts(String),
    #[error("cannot label an empty cluster")]
    EmptyCluster,
}

/// Sender → label map with explicit entries (from file) kept separate from
/// derived ones (fingerprints), so explicit labels always win.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    explicit: HashMap<Ipv4Addr, String>,
    derived: HashMap<Ipv4Addr, String>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Label for a sender; unlisted senders are [`UNKNOWN_LABEL`].
    pub fn label(&self, sender: Ipv4Addr) -> &str {
        self.explicit
            .get(&sender)
            .or_else(|| self.derived.get(&sender))
            .map_or(UNKNOWN_LABEL, String::as_str)
    }

    pub fn len(&self) -> usize {
        self.explicit.len() + self.derived.len()
    }

    pub fn is_empty(&self) -> bool {
        self.explicit.is_empty() && self.derived.is_empty()
    }

    pub fn insert_explicit(&mut self, sender: Ipv4Addr, label: String) {
        self.explicit.insert(sender, label);
    }
}

/// Load a `sender_ip,label` CSV. Duplicate rows with the same label are
/// tolerated; the same sender under two labels is an error listing every
/// conflict.
pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, GtError> {
    let file = std::fs::File::open(path)?;
    read_ground_truth(std::io::BufReader::new(file))
}

pub fn read_ground_truth(r: impl BufRead) -> Result<GroundTruth, GtError> {
    let mut gt = GroundTruth::new();
    let mut conflicts: Vec<String> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || (i == 0 && trimmed == GT_HEADER) {
            continue;
        }
        let Some((ip_str, label)) = trimmed.split_once(',') else {
            return Err(GtError::Parse { line: line_no, reason: "expected 2 fields".into() });
        };
        let sender: Ipv4Addr = ip_str.trim().parse().map_err(|_| GtError::Parse {
            line: line_no,
            reason: format!("bad sender {ip_str:?}"),
        })?;
        let label = label.trim();
        if label.is_empty() {
            return Err(GtError::Parse { line: line_no, reason: "empty label".into() });
        }
        match gt.explicit.get(&sender) {
            Some(existing) if existing != label => {
                conflicts.push(format!("{sender}: {existing:?} vs {label:?}"));
            }
            _ => {
                gt.explicit.insert(sender, label.to_string());
            }
        }
    }
    if !conflicts.is_empty() {
        return Err(GtError::Conflicts(conflicts.join("; ")));
    }
    Ok(gt)
}

/// The Mirai scanning signature: a TCP packet whose sequence number equals
/// the destination address read as a 32-bit big-endian integer.
pub fn mirai_fingerprint(record: &PacketRecord) -> bool {
    record.proto == Protocol::Tcp && record.tcp_seq == u32::from(record.dst_ip)
}

/// Label senders with at least one fingerprinted packet as Mirai-like,
/// never overriding an explicit ground-truth entry.
pub fn apply_mirai_labels(gt: &mut GroundTruth, batch: &DailyBatch) {
    for r in &batch.records {
        if mirai_fingerprint(r) && !gt.explicit.contains_key(&r.sender) {
            gt.derived.entry(r.sender).or_insert_with(|| MIRAI_LABEL.to_string());
        }
    }
}

/// Majority label of a cluster with its purity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabel {
    pub label: String,
    /// Fraction of members bearing the majority label, in (0, 1].
    pub purity: f64,
    pub size: usize,
}

/// Majority vote over the members' labels; ties break to the
/// lexicographically smallest label.
pub fn label_cluster(members: &BTreeSet<Ipv4Addr>, gt: &GroundTruth) -> Result<ClusterLabel, GtError> {
    if members.is_empty() {
        return Err(GtError::EmptyCluster);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &s in members {
        *counts.entry(gt.label(s)).or_insert(0) += 1;
    }
    let (label, count) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&l, &c)| (l, c))
        .expect("non-empty cluster");
    Ok(ClusterLabel {
        label: label.to_string(),
        purity: count as f64 / members.len() as f64,
        size: members.len(),
    })
}
