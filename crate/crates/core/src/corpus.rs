//! Conversion of a daily batch into the sender "sentences" the embedding
//! trainer consumes.
//!
//! Senders targeting the same service — a (protocol, destination port) pair,
//! with port 0 standing in for portless protocols — appear in one
//! timestamp-ordered sequence, so senders participating in the same activity
//! co-occur the way words do in text. Only active senders contribute; a
//! sender filtered out as inactive never appears in any sentence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;

use crate::ingest::{DailyBatch, Protocol};

/// A (protocol, destination port) key; one sentence per key.
///
/// Portless protocols always key to port 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ServiceKey {
    pub proto: Protocol,
    pub port: u16,
}

impl ServiceKey {
    pub fn new(proto: Protocol, port: u16) -> Self {
        let port = if proto.has_ports() { port } else { 0 };
        ServiceKey { proto, port }
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.proto, self.port)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("max_services must be at least 1")]
    ZeroServices,
    #[error("max_sentence_len must be at least 2, got {0}")]
    SentenceLenTooSmall(usize),
}

/// One training sentence: the service it came from and the sender sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub service: ServiceKey,
    pub senders: Vec<Ipv4Addr>,
}

/// The day's training input: sentences plus the vocabulary they cover.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub vocab: BTreeSet<Ipv4Addr>,
}

impl Corpus {
    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Dump: a `# service=PROTO/PORT` comment line before each sentence,
    /// senders space-separated.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for sentence in &self.sentences {
            writeln!(w, "# service={}", sentence.service)?;
            let mut first = true;
            for s in &sentence.senders {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{s}")?;
                first = false;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Group the batch's packets from active senders by service, preserving
/// timestamp order within each sequence.
pub fn build_services(
    batch: &DailyBatch,
    active: &BTreeSet<Ipv4Addr>,
) -> BTreeMap<ServiceKey, Vec<Ipv4Addr>> {
    let mut services: BTreeMap<ServiceKey, Vec<Ipv4Addr>> = BTreeMap::new();
    for r in &batch.records {
        if !active.contains(&r.sender) {
            continue;
        }
        let key = ServiceKey::new(r.proto, r.dst_port);
        services.entry(key).or_default().push(r.sender);
    }
    services
}

/// Corpus construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusParams {
    /// Keep only this many services, ranked by packet count.
    pub max_services: usize,
    /// Chunk longer sequences into consecutive windows of at most this length.
    pub max_sentence_len: usize,
    /// Collapse consecutive repeats of the same sender to one occurrence.
    pub collapse_runs: bool,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams { max_services: 2500, max_sentence_len: 10_000, collapse_runs: true }
    }
}

/// Turn service sequences into the day's corpus.
///
/// Services are ranked by packet count, ties broken by (proto, port)
/// ascending. Sentences shorter than 2 after run-collapse and chunking are
/// dropped: a lone sender yields no co-occurrence pairs.
pub fn to_corpus(
    services: &BTreeMap<ServiceKey, Vec<Ipv4Addr>>,
    params: &CorpusParams,
) -> Result<Corpus, CorpusError> {
    if params.max_services == 0 {
        return Err(CorpusError::ZeroServices);
    }
    if params.max_sentence_len < 2 {
        return Err(CorpusError::SentenceLenTooSmall(params.max_sentence_len));
    }

    // Rank by descending packet count, then (proto, port) ascending.
    let mut ranked: Vec<(&ServiceKey, &Vec<Ipv4Addr>)> = services.iter().collect();
    ranked.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    ranked.truncate(params.max_services);
    // Back to key order so the corpus is independent of the ranking's
    // internal layout.
    ranked.sort_by(|a, b| a.0.cmp(b.0));

    let mut corpus = Corpus::default();
    for (&service, seq) in ranked {
        let collapsed: Vec<Ipv4Addr> = if params.collapse_runs {
            let mut out: Vec<Ipv4Addr> = Vec::with_capacity(seq.len());
            for &s in seq {
                if out.last() != Some(&s) {
                    out.push(s);
                }
            }
            out
        } else {
            seq.clone()
        };

        for chunk in collapsed.chunks(params.max_sentence_len) {
            if chunk.len() < 2 {
                continue;
            }
            corpus.vocab.extend(chunk.iter().copied());
            corpus.sentences.push(Sentence { service, senders: chunk.to_vec() });
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{batch_by_day_with, PacketRecord};

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn rec(ts: f64, sender: &str, proto: Protocol, port: u16) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            sender: ip(sender),
            proto,
            dst_port: port,
            tcp_seq: 0,
            dst_ip: ip("192.0.2.1"),
        }
    }

    fn batch(records: Vec<PacketRecord>) -> DailyBatch {
        batch_by_day_with(records, 0).remove(0)
    }

    #[test]
    fn groups_by_service_in_time_order() {
        let b = batch(vec![
            rec(1.0, "10.0.0.1", Protocol::Tcp, 23),
            rec(2.0, "10.0.0.2", Protocol::Tcp, 23),
            rec(3.0, "10.0.0.1", Protocol::Tcp, 80),
        ]);
        let active: BTreeSet<Ipv4Addr> = [ip("10.0.0.1"), ip("10.0.0.2")].into();
        let services = build_services(&b, &active);
        assert_eq!(services[&ServiceKey::new(Protocol::Tcp, 23)], vec![ip("10.0.0.1"), ip("10.0.0.2")]);
        assert_eq!(services[&ServiceKey::new(Protocol::Tcp, 80)], vec![ip("10.0.0.1")]);
    }

    #[test]
    fn portless_protocols_share_one_key() {
        let b = batch(vec![
            rec(1.0, "10.0.0.1", Protocol::Icmp, 0),
            rec(2.0, "10.0.0.2", Protocol::Icmp, 0),
        ]);
        let active: BTreeSet<Ipv4Addr> = [ip("10.0.0.1"), ip("10.0.0.2")].into();
        let services = build_services(&b, &active);
        assert_eq!(services.len(), 1);
        assert_eq!(services[&ServiceKey::new(Protocol::Icmp, 0)].len(), 2);
    }

    #[test]
    fn inactive_senders_are_excluded() {
        let b = batch(vec![
            rec(1.0, "10.0.0.1", Protocol::Tcp, 23),
            rec(2.0, "10.0.0.3", Protocol::Tcp, 23),
        ]);
        let active: BTreeSet<Ipv4Addr> = [ip("10.0.0.1")].into();
        let services = build_services(&b, &active);
        assert_eq!(services[&ServiceKey::new(Protocol::Tcp, 23)], vec![ip("10.0.0.1")]);
    }

    #[test]
    fn run_collapse() {
        let mut services = BTreeMap::new();
        services.insert(
            ServiceKey::new(Protocol::Tcp, 23),
            vec![ip("10.0.0.1"), ip("10.0.0.1"), ip("10.0.0.1"), ip("10.0.0.2")],
        );
        let corpus = to_corpus(&services, &CorpusParams::default()).unwrap();
        assert_eq!(corpus.sentences.len(), 1);
        assert_eq!(corpus.sentences[0].senders, vec![ip("10.0.0.1"), ip("10.0.0.2")]);
    }

    #[test]
    fn service_cap_keeps_busiest_with_deterministic_ties() {
        let mut services = BTreeMap::new();
        let two = vec![ip("10.0.0.1"), ip("10.0.0.2")];
        services.insert(ServiceKey::new(Protocol::Tcp, 80), two.clone());
        services.insert(ServiceKey::new(Protocol::Tcp, 23), two.clone());
        services.insert(
            ServiceKey::new(Protocol::Udp, 53),
            vec![ip("10.0.0.1"), ip("10.0.0.2"), ip("10.0.0.3")],
        );
        let params = CorpusParams { max_services: 2, ..CorpusParams::default() };
        let corpus = to_corpus(&services, &params).unwrap();
        let kept: Vec<ServiceKey> = corpus.sentences.iter().map(|s| s.service).collect();
        // UDP/53 has most packets; TCP/23 beats TCP/80 on the (proto, port) tie-break.
        assert!(kept.contains(&ServiceKey::new(Protocol::Udp, 53)));
        assert!(kept.contains(&ServiceKey::new(Protocol::Tcp, 23)));
        assert!(!kept.contains(&ServiceKey::new(Protocol::Tcp, 80)));
    }

    #[test]
    fn chunking_splits_long_sentences() {
        let mut services = BTreeMap::new();
        let senders: Vec<Ipv4Addr> = (1..=10).map(|i| ip(&format!("10.0.0.{i}"))).collect();
        services.insert(ServiceKey::new(Protocol::Tcp, 23), senders);
        let params = CorpusParams { max_sentence_len: 4, ..CorpusParams::default() };
        let corpus = to_corpus(&services, &params).unwrap();
        let lens: Vec<usize> = corpus.sentences.iter().map(|s| s.senders.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
    }

    #[test]
    fn singleton_sentences_are_dropped() {
        let mut services = BTreeMap::new();
        services.insert(ServiceKey::new(Protocol::Tcp, 23), vec![ip("10.0.0.1")]);
        let corpus = to_corpus(&services, &CorpusParams::default()).unwrap();
        assert!(corpus.is_empty());
        assert!(corpus.vocab.is_empty());
    }

    #[test]
    fn bad_params_are_rejected() {
        let services = BTreeMap::new();
        assert_eq!(
            to_corpus(&services, &CorpusParams { max_services: 0, ..CorpusParams::default() }),
            Err(CorpusError::ZeroServices)
        );
        assert_eq!(
            to_corpus(&services, &CorpusParams { max_sentence_len: 1, ..CorpusParams::default() }),
            Err(CorpusError::SentenceLenTooSmall(1))
        );
    }

    #[test]
    fn dump_format() {
        let mut services = BTreeMap::new();
        services.insert(ServiceKey::new(Protocol::Tcp, 23), vec![ip("10.0.0.1"), ip("10.0.0.2")]);
        let corpus = to_corpus(&services, &CorpusParams::default()).unwrap();
        let mut buf = Vec::new();
        corpus.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# service=TCP/23\n10.0.0.1 10.0.0.2\n");
    }
}
