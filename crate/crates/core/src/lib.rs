//! Detection and tracking of coordinated sender activity in network-telescope
//! traffic.
//!
//! A network telescope (darknet) is an unused address block that receives only
//! unsolicited packets, so every sender it sees is worth a look. This crate
//! implements a three-stage batch pipeline over daily traffic snapshots:
//!
//! 1. **Embeddings** ([`corpus`], [`embed`]) — senders targeting the same
//!    services in the same period are turned into "sentences" and embedded
//!    with skip-gram negative sampling, warm-started day over day so sender
//!    identities stay stable.
//! 2. **Clustering** ([`cluster`]) — the day's active senders are partitioned
//!    with density-based hierarchical clustering (HDBSCAN procedure, cosine
//!    metric), with a designated noise cluster for unassigned points.
//! 3. **Dynamic cluster analysis** ([`dca`]) — consecutive partitions are
//!    compared with a set-overlap calculus that classifies every cluster as
//!    Inactive, Disappeared, Split, Survived or Absorbed, flags Emerged
//!    clusters, and matches them backward through history so that only
//!    genuinely never-seen groups are reported as novelties.
//!
//! Supporting modules: [`ingest`] (packet-log parsing and daily batching),
//! [`gtlabel`] (partial ground truth and majority-vote cluster labels),
//! [`report`] (plot-ready CSV data behind the standard figures and tables),
//! [`synth`] (scripted scenario generator for end-to-end testing) and
//! [`pipeline`]/[`config`] (orchestration used by the `scopetrack` binary).

pub mod cluster;
pub mod config;
pub mod corpus;
pub mod dca;
pub mod embed;
pub mod gtlabel;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod synth;

