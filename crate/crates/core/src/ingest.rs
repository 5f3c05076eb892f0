//! Packet-log parsing, daily batching, the active-sender filter and traffic
//! characterization statistics.
//!
//! The input format is a UTF-8 CSV with header
//! `timestamp,src_ip,proto,dst_port,tcp_seq,dst_ip`, one packet per line.
//! Fields that do not apply to a protocol (ports for ICMP/GRE, sequence
//! numbers for anything but TCP) may be left empty. Files ending in `.gz`
//! are transparently decompressed. Telescope captures are noisy, so
//! malformed lines are quarantined and counted instead of aborting the run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate};

/// Column header every packet log starts with.
pub const LOG_HEADER: &str = "timestamp,src_ip,proto,dst_port,tcp_seq,dst_ip";

/// Senders with more than this many packets in a day are "active".
pub const DEFAULT_MIN_PACKETS: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Transport protocols accepted by the telescope feed.
///
/// The derived `Ord` (declaration order) is the tie-break order used
/// wherever services must be ranked deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
    Gre,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Tcp, Protocol::Udp, Protocol::Icmp, Protocol::Gre];

    /// True for protocols where a destination port is meaningful.
    pub fn has_ports(self) -> bool {
        matches!(self, Protocol::Tcp | Protocol::Udp)
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
            Protocol::Icmp => "ICMP",
            Protocol::Gre => "GRE",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        for p in Protocol::ALL {
            if s.eq_ignore_ascii_case(p.name()) {
                return Ok(p);
            }
        }
        Err(())
    }
}

/// One unsolicited packet observed by the telescope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketRecord {
    /// Seconds since the Unix epoch, fractional part allowed.
    pub timestamp: f64,
    /// Source address; the entity being embedded, clustered and tracked.
    pub sender: Ipv4Addr,
    pub proto: Protocol,
    /// Destination port; 0 whenever `proto` has no ports.
    pub dst_port: u16,
    /// TCP sequence number; 0 for non-TCP packets.
    pub tcp_seq: u32,
    /// Destination inside the telescope block.
    pub dst_ip: Ipv4Addr,
}

impl PacketRecord {
    /// UTC calendar day this packet falls on.
    pub fn day(&self) -> NaiveDate {
        timestamp_day(self.timestamp).expect("timestamp validated at parse time")
    }
}

fn timestamp_day(ts: f64) -> Option<NaiveDate> {
    if !ts.is_finite() {
        return None;
    }
    let secs = ts.floor();
    if secs < i64::MIN as f64 || secs > i64::MAX as f64 {
        return None;
    }
    DateTime::from_timestamp(secs as i64, 0).map(|dt| dt.date_naive())
}

/// Why a line was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    FieldCount(usize),
    BadTimestamp,
    BadAddress(&'static str),
    UnknownProtocol(String),
    BadPort,
    PortOnPortless,
    BadSequence,
    SequenceOnNonTcp,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::FieldCount(n) => write!(f, "expected 6 fields, found {n}"),
            RejectReason::BadTimestamp => write!(f, "unparsable timestamp"),
            RejectReason::BadAddress(which) => write!(f, "unparsable {which} address"),
            RejectReason::UnknownProtocol(p) => write!(f, "unknown protocol {p:?}"),
            RejectReason::BadPort => write!(f, "unparsable destination port"),
            RejectReason::PortOnPortless => write!(f, "nonzero port on a portless protocol"),
            RejectReason::BadSequence => write!(f, "unparsable tcp sequence number"),
            RejectReason::SequenceOnNonTcp => write!(f, "nonzero tcp sequence on non-TCP packet"),
        }
    }
}

/// Quarantine report for malformed lines: nothing is silently dropped.
#[derive(Debug, Default, Clone)]
pub struct RejectReport {
    pub rejected: u64,
    /// First [`RejectReport::MAX_SAMPLES`] rejects as (line number, reason).
    pub samples: Vec<(u64, RejectReason)>,
}

impl RejectReport {
    pub const MAX_SAMPLES: usize = 100;

    fn record(&mut self, line_no: u64, reason: RejectReason) {
        self.rejected += 1;
        if self.samples.len() < Self::MAX_SAMPLES {
            self.samples.push((line_no, reason));
        }
    }
}

/// Parsed packet log: accepted records in file order plus the reject report.
#[derive(Debug, Default)]
pub struct ParsedLog {
    pub records: Vec<PacketRecord>,
    pub rejects: RejectReport,
}

fn parse_line(line: &str) -> Result<PacketRecord, RejectReason> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(RejectReason::FieldCount(fields.len()));
    }
    let timestamp: f64 = fields[0].trim().parse().map_err(|_| RejectReason::BadTimestamp)?;
    if timestamp_day(timestamp).is_none() {
        return Err(RejectReason::BadTimestamp);
    }
    let sender: Ipv4Addr = fields[1].trim().parse().map_err(|_| RejectReason::BadAddress("source"))?;
    let proto: Protocol = fields[2]
        .trim()
        .parse()
        .map_err(|_| RejectReason::UnknownProtocol(fields[2].trim().to_string()))?;

    let port_field = fields[3].trim();
    let dst_port: u16 = if port_field.is_empty() {
        0
    } else {
        port_field.parse().map_err(|_| RejectReason::BadPort)?
    };
    if !proto.has_ports() && dst_port != 0 {
        return Err(RejectReason::PortOnPortless);
    }

    let seq_field = fields[4].trim();
    let tcp_seq: u32 = if seq_field.is_empty() {
        0
    } else {
        seq_field.parse().map_err(|_| RejectReason::BadSequence)?
    };
    if proto != Protocol::Tcp && tcp_seq != 0 {
        return Err(RejectReason::SequenceOnNonTcp);
    }

    let dst_field = fields[5].trim();
    let dst_ip: Ipv4Addr = if dst_field.is_empty() {
        Ipv4Addr::UNSPECIFIED
    } else {
        dst_field.parse().map_err(|_| RejectReason::BadAddress("destination"))?
    };

    Ok(PacketRecord { timestamp, sender, proto, dst_port, tcp_seq, dst_ip })
}

fn open_log(path: &Path) -> Result<Box<dyn BufRead>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Open { path: path.to_path_buf(), source })?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

/// Parse a packet-log file, yielding records in file order.
///
/// A leading header line is skipped; every other unparsable line is counted
/// in the reject report with its line number.
pub fn parse_packet_log(path: &Path) -> Result<ParsedLog, IngestError> {
    let reader = open_log(path)?;
    let mut out = ParsedLog::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Read { path: path.to_path_buf(), source })?;
        let line_no = idx as u64 + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed == LOG_HEADER {
            continue;
        }
        match parse_line(trimmed) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejects.record(line_no, reason),
        }
    }
    Ok(out)
}

/// Parse several logs, concatenating records in argument order.
pub fn parse_packet_logs(paths: &[PathBuf]) -> Result<ParsedLog, IngestError> {
    let mut all = ParsedLog::default();
    for path in paths {
        let mut one = parse_packet_log(path)?;
        all.records.append(&mut one.records);
        all.rejects.rejected += one.rejects.rejected;
        for s in one.rejects.samples {
            if all.rejects.samples.len() < RejectReport::MAX_SAMPLES {
                all.rejects.samples.push(s);
            }
        }
    }
    Ok(all)
}

/// All records of one UTC calendar day plus derived per-sender state.
#[derive(Debug, Clone)]
pub struct DailyBatch {
    pub day: NaiveDate,
    /// Records sorted by timestamp (stable, so file order breaks ties).
    pub records: Vec<PacketRecord>,
    pub per_sender_counts: HashMap<Ipv4Addr, u64>,
    /// Senders above the activity threshold the batch was built with.
    pub active_senders: BTreeSet<Ipv4Addr>,
}

impl DailyBatch {
    fn build(day: NaiveDate, mut records: Vec<PacketRecord>, min_packets: u64) -> Self {
        records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let mut per_sender_counts = HashMap::new();
        for r in &records {
            *per_sender_counts.entry(r.sender).or_insert(0u64) += 1;
        }
        let mut batch = DailyBatch { day, records, per_sender_counts, active_senders: BTreeSet::new() };
        batch.active_senders = filter_active(&batch, min_packets);
        batch
    }

    /// Every sender that appears in the batch, active or not.
    pub fn all_senders(&self) -> BTreeSet<Ipv4Addr> {
        self.per_sender_counts.keys().copied().collect()
    }
}

/// Bucket records into one batch per UTC day, in day order.
///
/// Days with no records simply do not appear. Active-sender sets use the
/// default threshold; see [`batch_by_day_with`] to override it.
pub fn batch_by_day(records: Vec<PacketRecord>) -> Vec<DailyBatch> {
    batch_by_day_with(records, DEFAULT_MIN_PACKETS)
}

/// [`batch_by_day`] with an explicit activity threshold.
pub fn batch_by_day_with(records: Vec<PacketRecord>, min_packets: u64) -> Vec<DailyBatch> {
    let mut by_day: BTreeMap<NaiveDate, Vec<PacketRecord>> = BTreeMap::new();
    for r in records {
        by_day.entry(r.day()).or_default().push(r);
    }
    by_day
        .into_iter()
        .map(|(day, recs)| DailyBatch::build(day, recs, min_packets))
        .collect()
}

/// The active-sender filter: strictly more than `min_packets` packets.
///
/// Packets of all protocols count jointly toward the threshold.
pub fn filter_active(batch: &DailyBatch, min_packets: u64) -> BTreeSet<Ipv4Addr> {
    batch
        .per_sender_counts
        .iter()
        .filter(|(_, &n)| n > min_packets)
        .map(|(&s, _)| s)
        .collect()
}

/// Per-protocol slice of the characterization table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtocolStats {
    pub records: u64,
    /// Distinct senders over the whole window.
    pub window_senders: u64,
    /// Distinct ports over the whole window; `None` for portless protocols.
    pub window_ports: Option<u64>,
    pub daily_senders_mean: f64,
    pub daily_senders_std: f64,
    pub daily_ports_mean: Option<f64>,
    pub daily_ports_std: Option<f64>,
}

/// Characterization statistics over a window of batches: distinct senders
/// and ports per protocol, window totals, and daily mean ± std.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficStats {
    pub days: usize,
    pub per_protocol: BTreeMap<Protocol, ProtocolStats>,
    /// Union over protocols (a sender counted once even if it speaks several).
    pub total: ProtocolStats,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Compute [`TrafficStats`] over every record of the given batches.
///
/// The caller decides what goes in: restrict batches to active senders first
/// (see [`restrict_to_active`]) to reproduce the usual characterization table.
pub fn characterize(batches: &[DailyBatch]) -> TrafficStats {
    let mut per_protocol: BTreeMap<Protocol, ProtocolStats> = BTreeMap::new();
    let mut window_senders: HashMap<Protocol, BTreeSet<Ipv4Addr>> = HashMap::new();
    let mut window_ports: HashMap<Protocol, BTreeSet<u16>> = HashMap::new();
    let mut daily_senders: HashMap<Protocol, Vec<f64>> = HashMap::new();
    let mut daily_ports: HashMap<Protocol, Vec<f64>> = HashMap::new();

    let mut total_window_senders: BTreeSet<Ipv4Addr> = BTreeSet::new();
    let mut total_window_ports: BTreeSet<u16> = BTreeSet::new();
    let mut total_daily_senders: Vec<f64> = Vec::new();
    let mut total_daily_ports: Vec<f64> = Vec::new();
    let mut total_records = 0u64;

    for batch in batches {
        let mut day_senders: HashMap<Protocol, BTreeSet<Ipv4Addr>> = HashMap::new();
        let mut day_ports: HashMap<Protocol, BTreeSet<u16>> = HashMap::new();
        let mut day_all_senders: BTreeSet<Ipv4Addr> = BTreeSet::new();
        let mut day_all_ports: BTreeSet<u16> = BTreeSet::new();

        for r in &batch.records {
            per_protocol.entry(r.proto).or_default().records += 1;
            total_records += 1;
            window_senders.entry(r.proto).or_default().insert(r.sender);
            day_senders.entry(r.proto).or_default().insert(r.sender);
            total_window_senders.insert(r.sender);
            day_all_senders.insert(r.sender);
            if r.proto.has_ports() {
                window_ports.entry(r.proto).or_default().insert(r.dst_port);
                day_ports.entry(r.proto).or_default().insert(r.dst_port);
                total_window_ports.insert(r.dst_port);
                day_all_ports.insert(r.dst_port);
            }
        }

        for proto in Protocol::ALL {
            daily_senders
                .entry(proto)
                .or_default()
                .push(day_senders.get(&proto).map_or(0, BTreeSet::len) as f64);
            if proto.has_ports() {
                daily_ports
                    .entry(proto)
                    .or_default()
                    .push(day_ports.get(&proto).map_or(0, BTreeSet::len) as f64);
            }
        }
        total_daily_senders.push(day_all_senders.len() as f64);
        total_daily_ports.push(day_all_ports.len() as f64);
    }

    for proto in Protocol::ALL {
        let entry = per_protocol.entry(proto).or_default();
        entry.window_senders = window_senders.get(&proto).map_or(0, |s| s.len() as u64);
        let senders_series = daily_senders.get(&proto).cloned().unwrap_or_default();
        let (m, s) = mean_std(&senders_series);
        entry.daily_senders_mean = m;
        entry.daily_senders_std = s;
        if proto.has_ports() {
            entry.window_ports = Some(window_ports.get(&proto).map_or(0, |s| s.len() as u64));
            let ports_series = daily_ports.get(&proto).cloned().unwrap_or_default();
            let (m, s) = mean_std(&ports_series);
            entry.daily_ports_mean = Some(m);
            entry.daily_ports_std = Some(s);
        }
    }

    let (tm, ts) = mean_std(&total_daily_senders);
    let (pm, ps) = mean_std(&total_daily_ports);
    let total = ProtocolStats {
        records: total_records,
        window_senders: total_window_senders.len() as u64,
        window_ports: Some(total_window_ports.len() as u64),
        daily_senders_mean: tm,
        daily_senders_std: ts,
        daily_ports_mean: Some(pm),
        daily_ports_std: Some(ps),
    };

    TrafficStats { days: batches.len(), per_protocol, total }
}

/// Copy of a batch keeping only records sent by its active senders.
pub fn restrict_to_active(batch: &DailyBatch) -> DailyBatch {
    let records: Vec<PacketRecord> = batch
        .records
        .iter()
        .filter(|r| batch.active_senders.contains(&r.sender))
        .copied()
        .collect();
    let mut per_sender_counts = HashMap::new();
    for r in &records {
        *per_sender_counts.entry(r.sender).or_insert(0u64) += 1;
    }
    DailyBatch {
        day: batch.day,
        records,
        per_sender_counts,
        active_senders: batch.active_senders.clone(),
    }
}

/// Number of days each sender was active, plus the empirical complementary
/// CDF: for x = 1..=window length, the fraction of senders active ≥ x days.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveDays {
    pub per_sender: BTreeMap<Ipv4Addr, u32>,
    /// (x, fraction of senders with active-day count ≥ x).
    pub eccdf: Vec<(u32, f64)>,
}

pub fn active_days_distribution(batches: &[DailyBatch]) -> ActiveDays {
    let mut per_sender: BTreeMap<Ipv4Addr, u32> = BTreeMap::new();
    for batch in batches {
        for &s in &batch.active_senders {
            *per_sender.entry(s).or_insert(0) += 1;
        }
    }
    let n = per_sender.len() as f64;
    let window = batches.len() as u32;
    let eccdf = (1..=window)
        .map(|x| {
            let at_least = per_sender.values().filter(|&&d| d >= x).count() as f64;
            (x, if n == 0.0 { 0.0 } else { at_least / n })
        })
        .collect();
    ActiveDays { per_sender, eccdf }
}
