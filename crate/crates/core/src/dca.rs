//! Dynamic cluster analysis: classify transitions between consecutive
//! partitions, maintain persistent cluster lineages, and flag novelties by
//! matching emerged clusters backward against all past batches.
//!
//! The calculus is built on the asymmetric set-overlap `OL(X, Y) = |X∩Y|/|X|`
//! and the activity `A(X) = Σ_Y OL(X, Y)` over the next day's partition
//! including its noise cluster, which equals the fraction of X's members
//! still active. With thresholds τ0 (strong) and τ1 (loose) on the
//! normalized overlap `OL/A`, every source cluster receives exactly one
//! transition kind, evaluated in this order so that stronger evidence wins:
//!
//! 1. `A < τ1` → **Inactive** (no division is attempted when A = 0).
//! 2. strong match with noise → **Disappeared**.
//! 3. strong match with a real cluster → **Survived** when the source is the
//!    only strong matcher, or when its backward overlap `OL(Y, X) ≥ τ0`
//!    shows it is the target's main component; **Absorbed** otherwise.
//! 4. at least a loose match → **Split**, recording every loose target.
//! 5. nothing above → **Disappeared**.
//!
//! A next-day cluster nobody survived into is **Emerged**; an emerged
//! cluster whose raw overlap `OL(X, Y)` with every past cluster stays below
//! τ0 is a **Novelty**. Backward matching is deliberately unnormalized, and
//! noise clusters are never sources and never emerge, but they are legal
//! match targets and compete as strong matchers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;

use chrono::NaiveDate;

use crate::cluster::{Partition, NOISE_INDEX};

#[derive(Debug, thiserror::Error)]
pub enum DcaError {
    #[error("τ0 must be in [0.5, 1], got {0}")]
    BadTau0(f64),
    #[error("τ1 must be in (0, 0.5), got {0}")]
    BadTau1(f64),
    #[error("set-overlap is undefined for an empty source set")]
    EmptySource,
    #[error("partitions are not consecutive days: {0} then {1}")]
    NonConsecutive(NaiveDate, NaiveDate),
    #[error("lineage bookkeeping violated: {0}")]
    Lineage(String),
}

/// Strong (τ0) and loose (τ1) match thresholds; ranges enforced here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    tau0: f64,
    tau1: f64,
}

impl Thresholds {
    pub fn new(tau0: f64, tau1: f64) -> Result<Self, DcaError> {
        if !(0.5..=1.0).contains(&tau0) {
            return Err(DcaError::BadTau0(tau0));
        }
        if tau1 <= 0.0 || tau1 >= 0.5 {
            return Err(DcaError::BadTau1(tau1));
        }
        Ok(Thresholds { tau0, tau1 })
    }

    pub fn tau0(&self) -> f64 {
        self.tau0
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }
}

impl Default for Thresholds {
    /// τ0 = 0.65, τ1 = 0.3.
    fn default() -> Self {
        Thresholds { tau0: 0.65, tau1: 0.3 }
    }
}

/// Asymmetric set-overlap `|X ∩ Y| / |X|`.
pub fn overlap(x: &BTreeSet<Ipv4Addr>, y: &BTreeSet<Ipv4Addr>) -> Result<f64, DcaError> {
    if x.is_empty() {
        return Err(DcaError::EmptySource);
    }
    let inter = x.intersection(y).count();
    Ok(inter as f64 / x.len() as f64)
}

/// Activity `A(X) = Σ_Y OL(X, Y)` over every cluster of the next partition,
/// noise included: the fraction of X's members active on the next day.
pub fn activity(x: &BTreeSet<Ipv4Addr>, next: &Partition) -> Result<f64, DcaError> {
    if x.is_empty() {
        return Err(DcaError::EmptySource);
    }
    let mut sum = overlap(x, &next.noise)?;
    for members in next.clusters.values() {
        sum += overlap(x, members)?;
    }
    Ok(sum)
}

/// How a source cluster transitioned into the next day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransitionKind {
    Inactive,
    Disappeared,
    Split,
    Survived,
    Absorbed,
}

impl TransitionKind {
    pub const ALL: [TransitionKind; 5] = [
        TransitionKind::Inactive,
        TransitionKind::Disappeared,
        TransitionKind::Split,
        TransitionKind::Survived,
        TransitionKind::Absorbed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransitionKind::Inactive => "inactive",
            TransitionKind::Disappeared => "disappeared",
            TransitionKind::Split => "split",
            TransitionKind::Survived => "survived",
            TransitionKind::Absorbed => "absorbed",
        }
    }
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Classification of one source cluster at the day pair (t, t+1).
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Source day t.
    pub day: NaiveDate,
    /// Source cluster index in ζ_t (never the noise cluster).
    pub source: i32,
    pub kind: TransitionKind,
    /// A(X) for the source.
    pub activity: f64,
    /// Survived/Absorbed target cluster.
    pub principal: Option<i32>,
    /// Matched targets as (next-day cluster index, normalized overlap
    /// OL/A). Holds every non-noise target at or above τ1; a Disappeared
    /// caused by a strong noise match records (−1, r) instead.
    pub targets: Vec<(i32, f64)>,
}

/// Emergence state of one next-day cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct EmergenceRecord {
    /// Target day t+1.
    pub day: NaiveDate,
    pub cluster: i32,
    pub emerged: bool,
    /// Set only after backward matching; implies `emerged` and no backward
    /// match.
    pub novelty: bool,
    pub backward: Option<BackwardMatch>,
}

/// Most recent past cluster whose raw overlap with the emerged cluster
/// reaches τ0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardMatch {
    pub day: NaiveDate,
    pub cluster: i32,
    /// OL(past cluster, emerged cluster), unnormalized.
    pub overlap: f64,
}

/// Set-overlap table for one day pair: `OL(X_i, Y_j)` for every source and
/// target including the noise clusters, plus activities. Row sums over a
/// source equal its activity because the next partition, noise included,
/// partitions the next day's senders.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable {
    /// Source day t.
    pub day: NaiveDate,
    /// Source cluster indices, −1 first when the noise cluster is non-empty.
    pub sources: Vec<i32>,
    /// Target cluster indices, −1 always included.
    pub targets: Vec<i32>,
    /// `ol[si][tj]` aligned with `sources` × `targets`.
    pub ol: Vec<Vec<f64>>,
    /// `A(X)` per source, aligned with `sources`.
    pub activity: Vec<f64>,
}

/// Compute the full overlap table for (ζ_t, ζ_{t+1}).
pub fn overlap_table(prev: &Partition, next: &Partition) -> Result<OverlapTable, DcaError> {
    let mut sources: Vec<i32> = Vec::new();
    if !prev.noise.is_empty() {
        sources.push(NOISE_INDEX);
    }
    sources.extend(prev.clusters.keys().copied());
    let mut targets: Vec<i32> = vec![NOISE_INDEX];
    targets.extend(next.clusters.keys().copied());

    let mut ol = Vec::with_capacity(sources.len());
    let mut act = Vec::with_capacity(sources.len());
    for &si in &sources {
        let members = prev.members(si).expect("source index from the partition");
        let mut row = Vec::with_capacity(targets.len());
        for &tj in &targets {
            let tm = next.members(tj).expect("target index from the partition");
            row.push(overlap(members, tm)?);
        }
        ol.push(row);
        act.push(activity(members, next)?);
    }
    Ok(OverlapTable { day: prev.day, sources, targets, ol, activity: act })
}

/// Intersection counts of a source set against the next partition, the
/// integer core the classifier divides from.
struct SourceCounts {
    size: usize,
    /// |X ∩ V^{t+1}|.
    active: usize,
    /// target index → |X ∩ Y_j|, zero entries absent.
    per_target: BTreeMap<i32, usize>,
}

fn count_against(members: &BTreeSet<Ipv4Addr>, target_of: &HashMap<Ipv4Addr, i32>) -> SourceCounts {
    let mut per_target: BTreeMap<i32, usize> = BTreeMap::new();
    let mut active = 0usize;
    for s in members {
        if let Some(&t) = target_of.get(s) {
            active += 1;
            *per_target.entry(t).or_insert(0) += 1;
        }
    }
    SourceCounts { size: members.len(), active, per_target }
}

/// Classify every non-noise source cluster of `prev` against `next` and
/// flag the emerged clusters of `next` (novelty is left to backward
/// matching). Partitions must be consecutive days.
pub fn classify_transitions(
    prev: &Partition,
    next: &Partition,
    thresholds: &Thresholds,
) -> Result<(Vec<Transition>, Vec<EmergenceRecord>), DcaError> {
    if prev.day.succ_opt() != Some(next.day) {
        return Err(DcaError::NonConsecutive(prev.day, next.day));
    }
    let tau0 = thresholds.tau0;
    let tau1 = thresholds.tau1;

    // sender → next-day cluster index (−1 for noise).
    let mut target_of: HashMap<Ipv4Addr, i32> = HashMap::new();
    for (&j, members) in &next.clusters {
        for &s in members {
            target_of.insert(s, j);
        }
    }
    for &s in &next.noise {
        target_of.insert(s, NOISE_INDEX);
    }

    // Counts for every potential source, noise included: the survived /
    // absorbed arbitration below needs rivals, and noise competes too.
    let mut counts: BTreeMap<i32, SourceCounts> = BTreeMap::new();
    if !prev.noise.is_empty() {
        counts.insert(NOISE_INDEX, count_against(&prev.noise, &target_of));
    }
    for (&i, members) in &prev.clusters {
        counts.insert(i, count_against(members, &target_of));
    }

    let ratio = |c: &SourceCounts, j: i32| -> f64 {
        let ol = c.per_target.get(&j).copied().unwrap_or(0) as f64 / c.size as f64;
        let a = c.active as f64 / c.size as f64;
        ol / a
    };

    let mut transitions = Vec::new();
    let mut survived_into: BTreeMap<i32, i32> = BTreeMap::new();

    for (&i, c) in &counts {
        if i == NOISE_INDEX {
            continue; // noise is never classified as a source
        }
        let a = c.active as f64 / c.size as f64;
        let mut tr = Transition {
            day: prev.day,
            source: i,
            kind: TransitionKind::Inactive,
            activity: a,
            principal: None,
            targets: Vec::new(),
        };

        if a < tau1 {
            transitions.push(tr);
            continue;
        }

        let r_noise = ratio(c, NOISE_INDEX);
        if r_noise >= tau0 {
            tr.kind = TransitionKind::Disappeared;
            tr.targets.push((NOISE_INDEX, r_noise));
            transitions.push(tr);
            continue;
        }

        // Real targets at or above the loose threshold, and the best strong
        // one if any (largest r, then lowest index).
        let mut best_strong: Option<(i32, f64)> = None;
        for &j in c.per_target.keys() {
            if j == NOISE_INDEX {
                continue;
            }
            let r = ratio(c, j);
            if r >= tau1 {
                tr.targets.push((j, r));
            }
            if r >= tau0 && best_strong.is_none_or(|(_, br)| r > br) {
                best_strong = Some((j, r));
            }
        }

        if let Some((j, _)) = best_strong {
            // Rivals: every other source, noise included, that also
            // strongly matches Y_j.
            let mut rivals = 0;
            for (&k, kc) in &counts {
                if k == i || kc.active == 0 {
                    continue;
                }
                if ratio(kc, j) >= tau0 {
                    rivals += 1;
                }
            }
            if rivals == 0 {
                tr.kind = TransitionKind::Survived;
            } else {
                // Several strong matchers: the main component of Y_j (by
                // backward overlap) survives, the rest are absorbed.
                let y = next.clusters.get(&j).expect("strong target exists");
                let x = prev.clusters.get(&i).expect("source exists");
                let backward = overlap(y, x)?;
                tr.kind = if backward >= tau0 {
                    TransitionKind::Survived
                } else {
                    TransitionKind::Absorbed
                };
            }
            tr.principal = Some(j);
            if tr.kind == TransitionKind::Survived {
                if let Some(prior) = survived_into.insert(j, i) {
                    return Err(DcaError::Lineage(format!(
                        "clusters {prior} and {i} both survived into {j} on {}",
                        next.day
                    )));
                }
            }
        } else if tr.targets.is_empty() {
            tr.kind = TransitionKind::Disappeared;
        } else {
            tr.kind = TransitionKind::Split;
        }
        transitions.push(tr);
    }

    let emergences = next
        .clusters
        .keys()
        .map(|&j| EmergenceRecord {
            day: next.day,
            cluster: j,
            emerged: !survived_into.contains_key(&j),
            novelty: false,
            backward: None,
        })
        .collect();

    Ok((transitions, emergences))
}

/// Scan past partitions (most recent first) for a cluster whose raw overlap
/// `OL(X, Y)` with the emerged cluster reaches τ0. Ties within a day go to
/// the largest overlap, then the lowest cluster index. `history` must be in
/// ascending day order and contain only days strictly before the pair that
/// emerged `y`.
pub fn backward_match(
    y: &BTreeSet<Ipv4Addr>,
    history: &[Partition],
    thresholds: &Thresholds,
) -> Result<Option<BackwardMatch>, DcaError> {
    for past in history.iter().rev() {
        let mut best: Option<BackwardMatch> = None;
        for (&idx, members) in &past.clusters {
            let ol = overlap(members, y)?;
            if ol >= thresholds.tau0 && best.is_none_or(|b| ol > b.overlap) {
                best = Some(BackwardMatch { day: past.day, cluster: idx, overlap: ol });
            }
        }
        if best.is_some() {
            return Ok(best);
        }
    }
    Ok(None)
}

pub type LineageId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineageEventKind {
    /// First-day cluster, no predecessor to compare against.
    Seeded,
    Survived,
    /// Emerged cluster matched backward to this lineage after a gap.
    Reactivated,
    /// Emerged cluster with no past match: a new lineage.
    Novel,
}

impl LineageEventKind {
    pub fn name(self) -> &'static str {
        match self {
            LineageEventKind::Seeded => "seeded",
            LineageEventKind::Survived => "survived",
            LineageEventKind::Reactivated => "reactivated",
            LineageEventKind::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineageEvent {
    pub day: NaiveDate,
    pub cluster: i32,
    pub kind: LineageEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Split,
    Absorbed,
}

impl LinkKind {
    pub fn name(self) -> &'static str {
        match self {
            LinkKind::Split => "split",
            LinkKind::Absorbed => "absorbed",
        }
    }
}

/// Split/absorb edge between lineages at a day pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineageLink {
    /// Day t+1, where the target lives.
    pub day: NaiveDate,
    pub source: LineageId,
    pub target: LineageId,
    pub kind: LinkKind,
}

/// A lineage segment ending: the source stopped surviving at this day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentEnd {
    /// Source day t, the last day the lineage's cluster existed.
    pub day: NaiveDate,
    pub lineage: LineageId,
    pub kind: TransitionKind,
}

/// Persistent cluster identities across days: survivals extend a lineage,
/// novelties open one, and backward matches re-activate one after a gap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LineageRegistry {
    next_id: LineageId,
    pub histories: BTreeMap<LineageId, Vec<LineageEvent>>,
    pub index: BTreeMap<(NaiveDate, i32), LineageId>,
    pub links: Vec<LineageLink>,
    pub ends: Vec<SegmentEnd>,
}

impl LineageRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_lineages(&self) -> u64 {
        self.next_id
    }

    pub fn lineage_of(&self, day: NaiveDate, cluster: i32) -> Option<LineageId> {
        self.index.get(&(day, cluster)).copied()
    }

    fn open(&mut self, event: LineageEvent) -> LineageId {
        let id = self.next_id;
        self.next_id += 1;
        self.histories.insert(id, vec![event]);
        self.index.insert((event.day, event.cluster), id);
        id
    }

    fn extend(&mut self, id: LineageId, event: LineageEvent) -> Result<(), DcaError> {
        self.histories
            .get_mut(&id)
            .ok_or_else(|| DcaError::Lineage(format!("unknown lineage {id}")))?
            .push(event);
        self.index.insert((event.day, event.cluster), id);
        Ok(())
    }

    /// Register the first partition: every cluster opens a lineage, in
    /// cluster-index order.
    pub fn seed_day(&mut self, partition: &Partition) {
        for &cluster in partition.clusters.keys() {
            self.open(LineageEvent {
                day: partition.day,
                cluster,
                kind: LineageEventKind::Seeded,
            });
        }
    }

    /// Fold one day pair's outcomes into the registry. Emergence records
    /// must already carry their novelty/backward-match resolution.
    pub fn update(
        &mut self,
        transitions: &[Transition],
        emergences: &[EmergenceRecord],
    ) -> Result<(), DcaError> {
        // Survivals first: targets inherit their source lineage.
        for tr in transitions {
            if tr.kind != TransitionKind::Survived {
                continue;
            }
            let target = tr.principal.ok_or_else(|| {
                DcaError::Lineage(format!("survived source {} has no target", tr.source))
            })?;
            let id = self.lineage_of(tr.day, tr.source).ok_or_else(|| {
                DcaError::Lineage(format!("source ({}, {}) has no lineage", tr.day, tr.source))
            })?;
            let day = tr.day.succ_opt().expect("date overflow");
            self.extend(id, LineageEvent { day, cluster: target, kind: LineageEventKind::Survived })?;
        }

        // Emerged clusters: resume the backward-matched lineage or open a
        // fresh one.
        for em in emergences {
            if !em.emerged {
                continue;
            }
            if let Some(back) = em.backward {
                let id = self.lineage_of(back.day, back.cluster).ok_or_else(|| {
                    DcaError::Lineage(format!(
                        "backward match ({}, {}) has no lineage",
                        back.day, back.cluster
                    ))
                })?;
                self.extend(
                    id,
                    LineageEvent { day: em.day, cluster: em.cluster, kind: LineageEventKind::Reactivated },
                )?;
            } else {
                self.open(LineageEvent {
                    day: em.day,
                    cluster: em.cluster,
                    kind: LineageEventKind::Novel,
                });
            }
        }

        // Non-surviving sources end their segment; splits and absorptions
        // additionally link source lineage to target lineage.
        for tr in transitions {
            if tr.kind == TransitionKind::Survived {
                continue;
            }
            let id = self.lineage_of(tr.day, tr.source).ok_or_else(|| {
                DcaError::Lineage(format!("source ({}, {}) has no lineage", tr.day, tr.source))
            })?;
            self.ends.push(SegmentEnd { day: tr.day, lineage: id, kind: tr.kind });
            let next_day = tr.day.succ_opt().expect("date overflow");
            match tr.kind {
                TransitionKind::Split => {
                    for &(j, _) in &tr.targets {
                        if j == NOISE_INDEX {
                            continue;
                        }
                        let target_id = self.lineage_of(next_day, j).ok_or_else(|| {
                            DcaError::Lineage(format!("split target ({next_day}, {j}) unassigned"))
                        })?;
                        self.links.push(LineageLink {
                            day: next_day,
                            source: id,
                            target: target_id,
                            kind: LinkKind::Split,
                        });
                    }
                }
                TransitionKind::Absorbed => {
                    let j = tr.principal.ok_or_else(|| {
                        DcaError::Lineage(format!("absorbed source {} has no target", tr.source))
                    })?;
                    let target_id = self.lineage_of(next_day, j).ok_or_else(|| {
                        DcaError::Lineage(format!("absorb target ({next_day}, {j}) unassigned"))
                    })?;
                    self.links.push(LineageLink {
                        day: next_day,
                        source: id,
                        target: target_id,
                        kind: LinkKind::Absorbed,
                    });
                }
                _ => {}
            }
        }
        Ok(())
    }
}

// --- transition and lineage files ---------------------------------------------
//
// Structured text with stable field order for diff-based testing. Floats use
// Rust's shortest round-trip formatting.

pub const TRANSITIONS_HEADER: &str = "day,cluster,kind,activity,principal,targets";
pub const EMERGENCES_HEADER: &str =
    "day,cluster,emerged,novelty,backward_day,backward_cluster,backward_overlap";
pub const LINEAGES_HEADER: &str = "lineage,day,cluster,event";
pub const LINEAGE_LINKS_HEADER: &str = "day,source_lineage,target_lineage,kind";
pub const LINEAGE_ENDS_HEADER: &str = "day,lineage,kind";

pub fn write_transitions(transitions: &[Transition], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{TRANSITIONS_HEADER}")?;
    for t in transitions {
        let principal = t.principal.map(|p| p.to_string()).unwrap_or_default();
        let targets =
            t.targets.iter().map(|(j, r)| format!("{j}:{r}")).collect::<Vec<_>>().join(";");
        writeln!(w, "{},{},{},{},{},{}", t.day, t.source, t.kind, t.activity, principal, targets)?;
    }
    Ok(())
}

pub fn write_emergences(emergences: &[EmergenceRecord], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{EMERGENCES_HEADER}")?;
    for e in emergences {
        let (bd, bc, bo) = match e.backward {
            Some(b) => (b.day.to_string(), b.cluster.to_string(), b.overlap.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        writeln!(w, "{},{},{},{},{},{},{}", e.day, e.cluster, e.emerged, e.novelty, bd, bc, bo)?;
    }
    Ok(())
}

pub fn write_lineages(registry: &LineageRegistry, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{LINEAGES_HEADER}")?;
    for (id, events) in &registry.histories {
        for e in events {
            writeln!(w, "{},{},{},{}", id, e.day, e.cluster, e.kind.name())?;
        }
    }
    Ok(())
}

pub fn write_lineage_links(registry: &LineageRegistry, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{LINEAGE_LINKS_HEADER}")?;
    for l in &registry.links {
        writeln!(w, "{},{},{},{}", l.day, l.source, l.target, l.kind.name())?;
    }
    Ok(())
}

pub fn write_lineage_ends(registry: &LineageRegistry, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{LINEAGE_ENDS_HEADER}")?;
    for e in &registry.ends {
        writeln!(w, "{},{},{}", e.day, e.lineage, e.kind)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, day).unwrap()
    }

    fn ip(i: u32) -> Ipv4Addr {
        Ipv4Addr::from(0x0a00_0000u32 + i)
    }

    fn ips(range: std::ops::Range<u32>) -> BTreeSet<Ipv4Addr> {
        range.map(ip).collect()
    }

    /// Partition from cluster member sets plus noise.
    fn part(day: NaiveDate, clusters: Vec<BTreeSet<Ipv4Addr>>, noise: BTreeSet<Ipv4Addr>) -> Partition {
        let mut p = Partition::new(day);
        for (i, members) in clusters.into_iter().enumerate() {
            p.clusters.insert(i as i32, members);
        }
        p.noise = noise;
        p.validate().unwrap();
        p
    }

    fn kinds(trs: &[Transition]) -> BTreeMap<i32, TransitionKind> {
        trs.iter().map(|t| (t.source, t.kind)).collect()
    }

    #[test]
    fn threshold_ranges_enforced() {
        assert!(Thresholds::new(0.65, 0.3).is_ok());
        assert!(Thresholds::new(0.5, 0.49).is_ok());
        assert!(matches!(Thresholds::new(0.49, 0.3), Err(DcaError::BadTau0(_))));
        assert!(matches!(Thresholds::new(1.01, 0.3), Err(DcaError::BadTau0(_))));
        assert!(matches!(Thresholds::new(0.65, 0.5), Err(DcaError::BadTau1(_))));
        assert!(matches!(Thresholds::new(0.65, 0.0), Err(DcaError::BadTau1(_))));
        assert!(matches!(Thresholds::new(0.65, 0.6), Err(DcaError::BadTau1(_))));
    }

    #[test]
    fn overlap_asymmetry_and_bounds() {
        let x = ips(0..4);
        let y = ips(0..2);
        assert_eq!(overlap(&x, &y).unwrap(), 0.5);
        assert_eq!(overlap(&y, &x).unwrap(), 1.0);
        assert_eq!(overlap(&x, &x).unwrap(), 1.0);
        assert_eq!(overlap(&x, &ips(100..104)).unwrap(), 0.0);
        assert!(matches!(overlap(&BTreeSet::new(), &x), Err(DcaError::EmptySource)));
    }

    #[test]
    fn activity_counts_members_present_next_day() {
        // 10 members, 6 present next day scattered over clusters and noise.
        let x = ips(0..10);
        let next = part(
            d(2),
            vec![ips(0..3), ips(3..5).union(&ips(50..60)).copied().collect()],
            ips(5..6),
        );
        let a = activity(&x, &next).unwrap();
        assert!((a - 0.6).abs() < 1e-12);
        // row-sum identity against the overlap table
        let prev = part(d(1), vec![x.clone()], BTreeSet::new());
        let table = overlap_table(&prev, &next).unwrap();
        let row_sum: f64 = table.ol[0].iter().sum();
        assert!((row_sum - a).abs() < 1e-12);

        assert_eq!(activity(&ips(0..10), &part(d(2), vec![], ips(0..10))).unwrap(), 1.0);
        assert_eq!(activity(&ips(200..210), &next).unwrap(), 0.0);
    }

    #[test]
    fn inactive_when_activity_below_tau1() {
        let th = Thresholds::default();
        let prev = part(d(1), vec![ips(0..10)], BTreeSet::new());
        // only 2 of 10 present next day
        let next = part(d(2), vec![ips(0..2).union(&ips(20..40)).copied().collect()], BTreeSet::new());
        let (trs, _) = classify_transitions(&prev, &next, &th).unwrap();
        assert_eq!(trs[0].kind, TransitionKind::Inactive);
        assert!((trs[0].activity - 0.2).abs() < 1e-12);
    }

    #[test]
    fn wholesale_survival() {
        let th = Thresholds::default();
        let prev = part(d(1), vec![ips(0..10)], BTreeSet::new());
        let next = part(d(2), vec![ips(0..10)], BTreeSet::new());
        let (trs, ems) = classify_transitions(&prev, &next, &th).unwrap();
        assert_eq!(trs[0].kind, TransitionKind::Survived);
        assert_eq!(trs[0].principal, Some(0));
        assert!(!ems[0].emerged);
    }

    #[test]
    fn absorption_keeps_main_component_alive() {
        let th = Thresholds::default();
        // X0 has 100 members, X1 has 20; everything lands in Y0.
        let prev = part(d(1), vec![ips(0..100), ips(100..120)], BTreeSet::new());
        let next = part(d(2), vec![ips(0..120)], BTreeSet::new());
        let (trs, ems) = classify_transitions(&prev, &next, &th).unwrap();
        let k = kinds(&trs);
        assert_eq!(k[&0], TransitionKind::Survived); // OL(Y0, X0) = 100/120 ≥ τ0
        assert_eq!(k[&1], TransitionKind::Absorbed); // OL(Y0, X1) = 20/120 < τ0
        assert_eq!(trs[1].principal, Some(0));
        assert!(!ems[0].emerged);
    }

    #[test]
    fn even_split_emerges_both_halves() {
        let th = Thresholds::default();
        let prev = part(d(1), vec![ips(0..100)], BTreeSet::new());
        let next = part(d(2), vec![ips(0..50), ips(50..100)], BTreeSet::new());
        let (trs, ems) = classify_transitions(&prev, &next, &th).unwrap();
        assert_eq!(trs[0].kind, TransitionKind::Split);
        let targets: Vec<i32> = trs[0].targets.iter().map(|&(j, _)| j).collect();
        assert_eq!(targets, vec![0, 1]);
        for (_, r) in &trs[0].targets {
            assert!((r - 0.5).abs() < 1e-12);
        }
        assert!(ems.iter().all(|e| e.emerged));
    }

    #[test]
    fn strong_noise_match_is_disappearance() {
        let th = Thresholds::default();
        // |X| = 10, 8 active next day, 7 of them in noise: r(noise) = 0.875.
        let prev = part(d(1), vec![ips(0..10)], BTreeSet::new());
        let next = part(
            d(2),
            vec![ips(7..8).union(&ips(30..45)).copied().collect()],
            ips(0..7).union(&ips(100..120)).copied().collect(),
        );
        let (trs, _) = classify_transitions(&prev, &next, &th).unwrap();
        assert_eq!(trs[0].kind, TransitionKind::Disappeared);
        assert_eq!(trs[0].targets.len(), 1);
        assert_eq!(trs[0].targets[0].0, NOISE_INDEX);
        assert!((trs[0].targets[0].1 - 0.875).abs() < 1e-12);
    }

    #[test]
    fn no_match_at_all_is_disappearance() {
        let th = Thresholds::default();
        let prev = part(d(1), vec![ips(0..10)], BTreeSet::new());
        // Members active next day but scattered: 4 in noise (r = 0.4 < τ0),
        // 2 apiece in three clusters (r = 0.2 < τ1).
        let mut clusters = Vec::new();
        for k in 0..3u32 {
            let c: BTreeSet<Ipv4Addr> =
                ips(2 * k..2 * k + 2).union(&ips(40 + 20 * k..55 + 20 * k)).copied().collect();
            clusters.push(c);
        }
        let next = part(d(2), clusters, ips(6..10));
        let (trs, _) = classify_transitions(&prev, &next, &th).unwrap();
        assert_eq!(trs[0].kind, TransitionKind::Disappeared);
        assert!(trs[0].targets.is_empty());
    }

    #[test]
    fn consecutive_day_contract() {
        let th = Thresholds::default();
        let prev = part(d(1), vec![ips(0..10)], BTreeSet::new());
        let next = part(d(3), vec![ips(0..10)], BTreeSet::new());
        assert!(matches!(
            classify_transitions(&prev, &next, &th),
            Err(DcaError::NonConsecutive(_, _))
        ));
    }

    #[test]
    fn backward_match_finds_most_recent() {
        let th = Thresholds::default();
        let y = ips(0..10);
        let history = vec![
            part(d(1), vec![ips(0..10)], BTreeSet::new()),
            part(d(2), vec![ips(0..10)], BTreeSet::new()),
            part(d(3), vec![ips(500..520)], BTreeSet::new()),
        ];
        let m = backward_match(&y, &history, &th).unwrap().unwrap();
        assert_eq!(m.day, d(2));
        assert_eq!(m.cluster, 0);
        assert_eq!(m.overlap, 1.0);
    }

    #[test]
    fn backward_match_threshold_is_strict_at_the_boundary() {
        let th = Thresholds::default();
        let y = ips(0..200);
        // past cluster of 100 with 64 members in Y: OL = 0.64 < 0.65
        let mut past64 = ips(0..64);
        past64.extend(ips(1000..1036));
        let history = vec![part(d(1), vec![past64], BTreeSet::new())];
        assert!(backward_match(&y, &history, &th).unwrap().is_none());

        // 65 of 100 → exactly 0.65, matched (≥ is inclusive)
        let mut past65 = ips(0..65);
        past65.extend(ips(1000..1035));
        let history = vec![part(d(1), vec![past65], BTreeSet::new())];
        let m = backward_match(&y, &history, &th).unwrap().unwrap();
        assert!((m.overlap - 0.65).abs() < 1e-12);
    }

    #[test]
    fn never_seen_members_are_novel() {
        let th = Thresholds::default();
        let y = ips(900..960);
        let history = vec![part(d(1), vec![ips(0..50)], BTreeSet::new())];
        assert!(backward_match(&y, &history, &th).unwrap().is_none());
    }

    #[test]
    fn lineages_seed_survive_and_reactivate() {
        let th = Thresholds::default();
        let mut registry = LineageRegistry::new();

        // Day 1: two clusters seed lineages 0 and 1.
        let p1 = part(d(1), vec![ips(0..20), ips(100..130)], BTreeSet::new());
        registry.seed_day(&p1);
        assert_eq!(registry.num_lineages(), 2);

        // Day 2: cluster 0 survives; cluster 1 goes inactive.
        let p2 = part(d(2), vec![ips(0..20)], BTreeSet::new());
        let (trs, ems) = classify_transitions(&p1, &p2, &th).unwrap();
        assert!(ems.iter().all(|e| !e.emerged));
        registry.update(&trs, &ems).unwrap();
        assert_eq!(registry.lineage_of(d(2), 0), Some(0));
        assert_eq!(registry.ends.len(), 1);
        assert_eq!(registry.ends[0].kind, TransitionKind::Inactive);

        // Day 3: old cluster 1 senders come back; emerged + backward match.
        let p3 = part(d(3), vec![ips(0..20), ips(100..130)], BTreeSet::new());
        let (trs, mut ems) = classify_transitions(&p2, &p3, &th).unwrap();
        for em in &mut ems {
            if em.emerged {
                em.backward =
                    backward_match(&p3.clusters[&em.cluster], std::slice::from_ref(&p1), &th)
                        .unwrap();
                em.novelty = em.backward.is_none();
            }
        }
        registry.update(&trs, &ems).unwrap();
        // the reactivated cluster resumes lineage 1 rather than a fresh id
        assert_eq!(registry.lineage_of(d(3), 1), Some(1));
        assert_eq!(registry.num_lineages(), 2);
        let events = &registry.histories[&1];
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].kind, LineageEventKind::Reactivated);
    }

    #[test]
    fn sixteen_first_day_clusters_take_ids_zero_to_fifteen() {
        let mut registry = LineageRegistry::new();
        let clusters: Vec<BTreeSet<Ipv4Addr>> =
            (0..16).map(|k| ips(100 * k..100 * k + 10)).collect();
        let p = part(d(1), clusters, BTreeSet::new());
        registry.seed_day(&p);
        assert_eq!(registry.num_lineages(), 16);
        for k in 0..16 {
            assert_eq!(registry.lineage_of(d(1), k), Some(k as u64));
        }
    }

    #[test]
    fn long_survival_accumulates_history() {
        let th = Thresholds::default();
        let mut registry = LineageRegistry::new();
        let mut prev = part(d(1), vec![ips(0..20)], BTreeSet::new());
        registry.seed_day(&prev);
        for day in 2..=20 {
            let next = part(d(day), vec![ips(0..20)], BTreeSet::new());
            let (trs, ems) = classify_transitions(&prev, &next, &th).unwrap();
            registry.update(&trs, &ems).unwrap();
            prev = next;
        }
        assert_eq!(registry.num_lineages(), 1);
        assert_eq!(registry.histories[&0].len(), 20);
    }

    #[test]
    fn split_links_source_to_both_parts() {
        let th = Thresholds::default();
        let mut registry = LineageRegistry::new();
        let p1 = part(d(1), vec![ips(0..100)], BTreeSet::new());
        registry.seed_day(&p1);
        let p2 = part(d(2), vec![ips(0..50), ips(50..100)], BTreeSet::new());
        let (trs, mut ems) = classify_transitions(&p1, &p2, &th).unwrap();
        for em in &mut ems {
            if em.emerged {
                em.novelty = true; // no history in this test
            }
        }
        registry.update(&trs, &ems).unwrap();
        assert_eq!(registry.num_lineages(), 3);
        assert_eq!(registry.links.len(), 2);
        for link in &registry.links {
            assert_eq!(link.source, 0);
            assert_eq!(link.kind, LinkKind::Split);
        }
    }

    #[test]
    fn transitions_file_layout() {
        let th = Thresholds::default();
        let prev = part(d(1), vec![ips(0..10)], BTreeSet::new());
        let next = part(d(2), vec![ips(0..10)], BTreeSet::new());
        let (trs, ems) = classify_transitions(&prev, &next, &th).unwrap();
        let mut buf = Vec::new();
        write_transitions(&trs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "day,cluster,kind,activity,principal,targets\n2021-06-01,0,survived,1,0,0:1\n"
        );
        let mut buf = Vec::new();
        write_emergences(&ems, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(EMERGENCES_HEADER));
        assert!(text.contains("2021-06-02,0,false,false,,,"));
    }
}
