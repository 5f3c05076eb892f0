//! Density-based hierarchical clustering of the day's sender embeddings and
//! silhouette quality scoring.
//!
//! The clusterer follows the HDBSCAN procedure: core distances (k-th nearest
//! neighbour with k tied to the minimum cluster size, self included, the
//! common default), mutual reachability distances, a minimum spanning tree,
//! a single-linkage hierarchy, a condensed tree that sheds components
//! smaller than the minimum size, and excess-of-mass cluster extraction.
//! Points never captured by a selected cluster form the designated noise
//! cluster, index −1.
//!
//! Cluster indices are assigned 0, 1, 2, … ordered by each cluster's lowest
//! member (senders sort ascending), so a partition is reproducible no matter
//! how the hierarchy was traversed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::embed::cosine_distance;

/// Designated noise cluster index in snapshots and reports.
pub const NOISE_INDEX: i32 = -1;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("minClusterSize must be at least 2, got {0}")]
    MinClusterSize(usize),
    #[error("sender {0} has a zero embedding vector")]
    ZeroVector(Ipv4Addr),
    #[error("sender {0} missing from the distance input")]
    MissingSender(Ipv4Addr),
    #[error("partition invariant violated: {0}")]
    Invalid(String),
    #[error("snapshot i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot line {line}: {reason}")]
    Snapshot { line: u64, reason: String },
}

/// Pairwise distances over an indexed sender list.
///
/// Implemented by the dense matrix and by the on-the-fly variant that
/// recomputes rows from normalized vectors to bound memory.
pub trait PairwiseDistances: Sync {
    fn len(&self) -> usize;
    fn senders(&self) -> &[Ipv4Addr];
    fn dist(&self, i: usize, j: usize) -> f64;
}

/// Dense symmetric cosine-distance matrix.
pub struct CosineMatrix {
    senders: Vec<Ipv4Addr>,
    n: usize,
    data: Vec<f64>,
}

impl CosineMatrix {
    pub fn sender_index(&self, sender: Ipv4Addr) -> Option<usize> {
        self.senders.binary_search(&sender).ok()
    }
}

impl PairwiseDistances for CosineMatrix {
    fn len(&self) -> usize {
        self.n
    }

    fn senders(&self) -> &[Ipv4Addr] {
        &self.senders
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Build the dense pairwise cosine matrix over the given embeddings.
///
/// Senders are indexed in ascending address order. Rows are computed in
/// parallel; the values are identical to element-wise [`cosine_distance`].
pub fn pairwise_cosine_matrix(
    embeddings: &BTreeMap<Ipv4Addr, Vec<f64>>,
) -> Result<CosineMatrix, ClusterError> {
    let senders: Vec<Ipv4Addr> = embeddings.keys().copied().collect();
    let vectors: Vec<&Vec<f64>> = embeddings.values().collect();
    let n = senders.len();
    for (s, v) in embeddings {
        if v.iter().all(|&x| x == 0.0) {
            return Err(ClusterError::ZeroVector(*s));
        }
    }
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = if i == j {
                0.0
            } else {
                cosine_distance(vectors[i], vectors[j]).expect("zero vectors rejected above")
            };
        }
    });
    Ok(CosineMatrix { senders, n, data })
}

/// Cosine distances recomputed on demand from unit-normalized vectors; keeps
/// memory at O(n·dim) instead of O(n²) for big days.
pub struct CosineLazy {
    senders: Vec<Ipv4Addr>,
    dim: usize,
    unit: Vec<f64>,
}

impl CosineLazy {
    pub fn new(embeddings: &BTreeMap<Ipv4Addr, Vec<f64>>) -> Result<Self, ClusterError> {
        let senders: Vec<Ipv4Addr> = embeddings.keys().copied().collect();
        let dim = embeddings.values().next().map_or(0, |v| v.len());
        let mut unit = Vec::with_capacity(senders.len() * dim);
        for (s, v) in embeddings {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(ClusterError::ZeroVector(*s));
            }
            unit.extend(v.iter().map(|x| x / norm));
        }
        Ok(CosineLazy { senders, dim, unit })
    }
}

impl PairwiseDistances for CosineLazy {
    fn len(&self) -> usize {
        self.senders.len()
    }

    fn senders(&self) -> &[Ipv4Addr] {
        &self.senders
    }

    fn dist(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let a = &self.unit[i * self.dim..(i + 1) * self.dim];
        let b = &self.unit[j * self.dim..(j + 1) * self.dim];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (1.0 - dot).clamp(0.0, 2.0)
    }
}

/// Non-overlapping assignment of the day's active senders to clusters plus
/// the designated noise cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub day: NaiveDate,
    /// Cluster index (≥ 0) → members.
    pub clusters: BTreeMap<i32, BTreeSet<Ipv4Addr>>,
    /// The noise cluster, index −1.
    pub noise: BTreeSet<Ipv4Addr>,
    /// `minClusterSize` used to build the partition; 0 when imported.
    pub min_cluster_size: usize,
    /// Distance metric tag, `cosine` for everything this crate builds.
    pub metric: String,
    /// Set when the input had fewer points than `minClusterSize` and the
    /// whole day was therefore assigned to noise.
    pub undersized_input: bool,
}

impl Partition {
    pub fn new(day: NaiveDate) -> Self {
        Partition {
            day,
            clusters: BTreeMap::new(),
            noise: BTreeSet::new(),
            min_cluster_size: 0,
            metric: "cosine".to_string(),
            undersized_input: false,
        }
    }

    /// Every sender in the partition, clusters and noise together.
    pub fn all_senders(&self) -> BTreeSet<Ipv4Addr> {
        let mut all = self.noise.clone();
        for members in self.clusters.values() {
            all.extend(members.iter().copied());
        }
        all
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Members of a cluster index; −1 resolves to the noise cluster.
    pub fn members(&self, index: i32) -> Option<&BTreeSet<Ipv4Addr>> {
        if index == NOISE_INDEX {
            Some(&self.noise)
        } else {
            self.clusters.get(&index)
        }
    }

    /// Check disjointness and non-emptiness of the non-noise clusters.
    pub fn validate(&self) -> Result<(), ClusterError> {
        let mut seen: BTreeSet<Ipv4Addr> = BTreeSet::new();
        for (&idx, members) in &self.clusters {
            if idx < 0 {
                return Err(ClusterError::Invalid(format!("cluster index {idx} is negative")));
            }
            if members.is_empty() {
                return Err(ClusterError::Invalid(format!("cluster {idx} is empty")));
            }
            for &s in members {
                if !seen.insert(s) {
                    return Err(ClusterError::Invalid(format!("sender {s} in two clusters")));
                }
            }
        }
        for &s in &self.noise {
            if !seen.insert(s) {
                return Err(ClusterError::Invalid(format!("sender {s} in a cluster and in noise")));
            }
        }
        Ok(())
    }
}

const LAMBDA_EPS: f64 = 1e-12;

fn lambda_of(distance: f64) -> f64 {
    1.0 / distance.max(LAMBDA_EPS)
}

struct MstEdge {
    a: usize,
    b: usize,
    dist: f64,
}

/// Prim's algorithm over the mutual reachability graph, O(n²).
fn mutual_reachability_mst(dists: &impl PairwiseDistances, core: &[f64]) -> Vec<MstEdge> {
    let n = dists.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));

    let mut current = 0usize;
    for _ in 1..n {
        in_tree[current] = true;
        let mut next = usize::MAX;
        let mut next_dist = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = core[current].max(core[j]).max(dists.dist(current, j));
            if mr < best[j] {
                best[j] = mr;
                best_from[j] = current;
            }
            if best[j] < next_dist {
                next_dist = best[j];
                next = j;
            }
        }
        edges.push(MstEdge { a: best_from[next], b: next, dist: next_dist });
        current = next;
    }
    edges.sort_by(|x, y| x.dist.total_cmp(&y.dist).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    /// Hierarchy node currently representing each root component.
    node: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n], node: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, ra: usize, rb: usize, new_node: usize) -> usize {
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.node[big] = new_node;
        self.size[big]
    }
}

/// Single-linkage tree node: children < n are points, ≥ n are `nodes[c - n]`.
struct SltNode {
    left: usize,
    right: usize,
    dist: f64,
    size: usize,
}

fn single_linkage_tree(n: usize, edges: &[MstEdge]) -> Vec<SltNode> {
    let mut uf = UnionFind::new(n);
    let mut nodes: Vec<SltNode> = Vec::with_capacity(n.saturating_sub(1));
    for e in edges {
        let ra = uf.find(e.a);
        let rb = uf.find(e.b);
        let left = uf.node[ra];
        let right = uf.node[rb];
        let new_node = n + nodes.len();
        let size = uf.union(ra, rb, new_node);
        nodes.push(SltNode { left, right, dist: e.dist, size });
    }
    nodes
}

struct CondensedCluster {
    parent: usize,
    birth_lambda: f64,
    stability: f64,
    children: Vec<usize>,
}

struct CondensedTree {
    clusters: Vec<CondensedCluster>,
    /// point → deepest condensed cluster it belonged to.
    point_cluster: Vec<usize>,
}

fn subtree_points(n: usize, nodes: &[SltNode], root: usize, out: &mut Vec<usize>) {
    let mut stack = vec![root];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let node = &nodes[x - n];
            stack.push(node.left);
            stack.push(node.right);
        }
    }
}

fn child_size(n: usize, nodes: &[SltNode], child: usize) -> usize {
    if child < n {
        1
    } else {
        nodes[child - n].size
    }
}

/// Walk the hierarchy top-down, keeping splits where both sides reach
/// `min_cluster_size` and shedding smaller components as fall-out points.
fn condense_tree(n: usize, nodes: &[SltNode], min_cluster_size: usize) -> CondensedTree {
    let root_cluster = CondensedCluster {
        parent: usize::MAX,
        birth_lambda: 0.0,
        stability: 0.0,
        children: Vec::new(),
    };
    let mut clusters = vec![root_cluster];
    let mut point_cluster = vec![0usize; n];
    let mut scratch = Vec::new();

    // (slt node, owning condensed cluster)
    let mut stack: Vec<(usize, usize)> = vec![(n + nodes.len() - 1, 0)];
    while let Some((node_idx, cid)) = stack.pop() {
        let node = &nodes[node_idx - n];
        let lambda = lambda_of(node.dist);
        let left_size = child_size(n, nodes, node.left);
        let right_size = child_size(n, nodes, node.right);
        let left_big = left_size >= min_cluster_size;
        let right_big = right_size >= min_cluster_size;
        let birth = clusters[cid].birth_lambda;

        match (left_big, right_big) {
            (true, true) => {
                // True split: both sides persist as new clusters.
                clusters[cid].stability += (lambda - birth) * (left_size + right_size) as f64;
                for &child in &[node.left, node.right] {
                    let new_cid = clusters.len();
                    clusters.push(CondensedCluster {
                        parent: cid,
                        birth_lambda: lambda,
                        stability: 0.0,
                        children: Vec::new(),
                    });
                    clusters[cid].children.push(new_cid);
                    // A bare point cannot reach min_cluster_size ≥ 2; this
                    // arm only sees internal nodes.
                    stack.push((child, new_cid));
                }
            }
            (true, false) => {
                clusters[cid].stability += (lambda - birth) * right_size as f64;
                fall_out(n, nodes, node.right, cid, &mut point_cluster, &mut scratch);
                descend(n, node.left, cid, &mut stack, &mut point_cluster);
            }
            (false, true) => {
                clusters[cid].stability += (lambda - birth) * left_size as f64;
                fall_out(n, nodes, node.left, cid, &mut point_cluster, &mut scratch);
                descend(n, node.right, cid, &mut stack, &mut point_cluster);
            }
            (false, false) => {
                // The cluster dissolves here; everything below falls out.
                clusters[cid].stability += (lambda - birth) * (left_size + right_size) as f64;
                fall_out(n, nodes, node.left, cid, &mut point_cluster, &mut scratch);
                fall_out(n, nodes, node.right, cid, &mut point_cluster, &mut scratch);
            }
        }
    }

    CondensedTree { clusters, point_cluster }
}

fn fall_out(
    n: usize,
    nodes: &[SltNode],
    child: usize,
    cid: usize,
    point_cluster: &mut [usize],
    scratch: &mut Vec<usize>,
) {
    scratch.clear();
    subtree_points(n, nodes, child, scratch);
    for &p in scratch.iter() {
        point_cluster[p] = cid;
    }
}

fn descend(
    n: usize,
    child: usize,
    cid: usize,
    stack: &mut Vec<(usize, usize)>,
    point_cluster: &mut [usize],
) {
    if child < n {
        point_cluster[child] = cid;
    } else {
        stack.push((child, cid));
    }
}

/// Excess-of-mass selection: keep a cluster when its own stability is at
/// least the propagated stability of its children. The root is never a
/// candidate.
fn extract_eom(tree: &CondensedTree) -> Vec<bool> {
    let m = tree.clusters.len();
    let mut selected = vec![false; m];
    let mut propagated = vec![0.0f64; m];

    for cid in (0..m).rev() {
        let child_sum: f64 = tree.clusters[cid].children.iter().map(|&c| propagated[c]).sum();
        if cid == 0 {
            propagated[0] = child_sum;
            continue;
        }
        if tree.clusters[cid].children.is_empty() || tree.clusters[cid].stability >= child_sum {
            selected[cid] = true;
            propagated[cid] = tree.clusters[cid].stability;
            // Deselect everything below.
            let mut stack = tree.clusters[cid].children.clone();
            while let Some(c) = stack.pop() {
                selected[c] = false;
                stack.extend(tree.clusters[c].children.iter().copied());
            }
        } else {
            propagated[cid] = child_sum;
        }
    }
    selected
}

/// Run the HDBSCAN procedure over pairwise distances.
///
/// Inputs smaller than `min_cluster_size` come back as all noise with the
/// `undersized_input` flag set.
pub fn hdbscan(
    dists: &impl PairwiseDistances,
    min_cluster_size: usize,
    day: NaiveDate,
) -> Result<Partition, ClusterError> {
    if min_cluster_size < 2 {
        return Err(ClusterError::MinClusterSize(min_cluster_size));
    }
    let n = dists.len();
    let senders = dists.senders();
    let mut partition = Partition::new(day);
    partition.min_cluster_size = min_cluster_size;

    if n < min_cluster_size {
        partition.noise.extend(senders.iter().copied());
        partition.undersized_input = n > 0;
        return Ok(partition);
    }

    // Core distance: k-th nearest neighbour with k = minClusterSize,
    // counting the point itself (the common implementation convention).
    let core: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| dists.dist(i, j)).collect();
            row.sort_by(f64::total_cmp);
            row[min_cluster_size - 1]
        })
        .collect();

    let edges = mutual_reachability_mst(dists, &core);
    let nodes = single_linkage_tree(n, &edges);
    let tree = condense_tree(n, &nodes, min_cluster_size);
    let selected = extract_eom(&tree);

    // Label: nearest selected ancestor of the point's fall-out cluster.
    let mut cluster_points: HashMap<usize, Vec<usize>> = HashMap::new();
    for p in 0..n {
        let mut cid = tree.point_cluster[p];
        loop {
            if selected[cid] {
                cluster_points.entry(cid).or_default().push(p);
                break;
            }
            if cid == 0 {
                partition.noise.insert(senders[p]);
                break;
            }
            cid = tree.clusters[cid].parent;
        }
    }

    // Deterministic indices: order clusters by their lowest member.
    let mut groups: Vec<Vec<usize>> = cluster_points.into_values().collect();
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    for (idx, group) in groups.into_iter().enumerate() {
        let members: BTreeSet<Ipv4Addr> = group.into_iter().map(|p| senders[p]).collect();
        partition.clusters.insert(idx as i32, members);
    }

    partition.validate()?;
    Ok(partition)
}

/// Per-sample silhouette values with per-cluster and day means.
///
/// Noise samples are excluded. With fewer than two non-noise clusters the
/// score is undefined and the report says so instead of inventing numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteReport {
    pub day: NaiveDate,
    pub defined: bool,
    pub values: BTreeMap<Ipv4Addr, f64>,
    pub per_cluster_mean: BTreeMap<i32, f64>,
    pub day_mean: Option<f64>,
}

/// Standard silhouette `s(i) = (b − a)/max(a, b)` over the given distances,
/// using plain cosine distance (not the mutual-reachability transform).
/// Singleton clusters score 0 by convention.
pub fn silhouette(
    partition: &Partition,
    dists: &impl PairwiseDistances,
) -> Result<SilhouetteReport, ClusterError> {
    let mut report = SilhouetteReport {
        day: partition.day,
        defined: false,
        values: BTreeMap::new(),
        per_cluster_mean: BTreeMap::new(),
        day_mean: None,
    };
    if partition.clusters.len() < 2 {
        return Ok(report);
    }
    report.defined = true;

    let index: HashMap<Ipv4Addr, usize> =
        dists.senders().iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut cluster_indices: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (&c, members) in &partition.clusters {
        let idxs = members
            .iter()
            .map(|s| index.get(s).copied().ok_or(ClusterError::MissingSender(*s)))
            .collect::<Result<Vec<usize>, _>>()?;
        cluster_indices.insert(c, idxs);
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for (&c, own) in &cluster_indices {
        let mut cluster_sum = 0.0;
        for &i in own {
            let s = if own.len() == 1 {
                0.0
            } else {
                let a = own.iter().filter(|&&j| j != i).map(|&j| dists.dist(i, j)).sum::<f64>()
                    / (own.len() - 1) as f64;
                let b = cluster_indices
                    .iter()
                    .filter(|(&d, _)| d != c)
                    .map(|(_, other)| {
                        other.iter().map(|&j| dists.dist(i, j)).sum::<f64>() / other.len() as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                let denom = a.max(b);
                if denom == 0.0 {
                    0.0
                } else {
                    (b - a) / denom
                }
            };
            report.values.insert(dists.senders()[i], s);
            cluster_sum += s;
            total += s;
            count += 1;
        }
        report.per_cluster_mean.insert(c, cluster_sum / own.len() as f64);
    }
    report.day_mean = Some(total / count as f64);
    Ok(report)
}

// --- partition snapshots -----------------------------------------------------
//
// One record per sender: `day,sender,cluster`, with −1 for noise. Rows are
// sorted by (day, sender) so identical partitions serialize identically.
// This is also the import format: externally produced clusterings can feed
// the tracking stage directly.

pub const SNAPSHOT_HEADER: &str = "day,sender,cluster";

pub fn write_partition(partition: &Partition, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{SNAPSHOT_HEADER}")?;
    let mut rows: BTreeMap<Ipv4Addr, i32> = BTreeMap::new();
    for (&idx, members) in &partition.clusters {
        for &s in members {
            rows.insert(s, idx);
        }
    }
    for &s in &partition.noise {
        rows.insert(s, NOISE_INDEX);
    }
    for (s, idx) in rows {
        writeln!(w, "{},{},{}", partition.day, s, idx)?;
    }
    Ok(())
}

/// Read one or more day partitions from a snapshot stream; multi-day files
/// are split on the day column. Partitions come back in day order.
pub fn read_partitions(r: impl BufRead) -> Result<Vec<Partition>, ClusterError> {
    let mut by_day: BTreeMap<NaiveDate, Partition> = BTreeMap::new();
    let mut seen: BTreeMap<NaiveDate, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || (i == 0 && trimmed == SNAPSHOT_HEADER) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 3 {
            return Err(ClusterError::Snapshot {
                line: line_no,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let day: NaiveDate = fields[0].parse().map_err(|_| ClusterError::Snapshot {
            line: line_no,
            reason: format!("bad day {:?}", fields[0]),
        })?;
        let sender: Ipv4Addr = fields[1].parse().map_err(|_| ClusterError::Snapshot {
            line: line_no,
            reason: format!("bad sender {:?}", fields[1]),
        })?;
        let idx: i32 = fields[2].parse().map_err(|_| ClusterError::Snapshot {
            line: line_no,
            reason: format!("bad cluster index {:?}", fields[2]),
        })?;
        if idx < NOISE_INDEX {
            return Err(ClusterError::Snapshot {
                line: line_no,
                reason: format!("cluster index {idx} below -1"),
            });
        }
        if !seen.entry(day).or_default().insert(sender) {
            return Err(ClusterError::Snapshot {
                line: line_no,
                reason: format!("duplicate sender {sender} on {day}"),
            });
        }
        let partition = by_day.entry(day).or_insert_with(|| Partition::new(day));
        if idx == NOISE_INDEX {
            partition.noise.insert(sender);
        } else {
            partition.clusters.entry(idx).or_default().insert(sender);
        }
    }
    let partitions: Vec<Partition> = by_day.into_values().collect();
    for p in &partitions {
        p.validate()?;
    }
    Ok(partitions)
}

/// Read partitions from a list of snapshot files; a day may not span files.
pub fn read_partition_files(paths: &[impl AsRef<Path>]) -> Result<Vec<Partition>, ClusterError> {
    let mut all: BTreeMap<NaiveDate, Partition> = BTreeMap::new();
    for path in paths {
        let file = std::fs::File::open(path.as_ref())?;
        for p in read_partitions(std::io::BufReader::new(file))? {
            let day = p.day;
            if all.insert(day, p).is_some() {
                return Err(ClusterError::Invalid(format!(
                    "day {day} appears in more than one snapshot file"
                )));
            }
        }
    }
    Ok(all.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, 1).unwrap()
    }

    fn ip(i: u32) -> Ipv4Addr {
        Ipv4Addr::from(0x0a00_0000u32 + i)
    }

    /// Unit vector near ±`axis` in `dim` dims, jittered off-axis by `eps`.
    fn blob_vec(dim: usize, axis: usize, sign: f64, eps: f64, salt: u64) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[axis] = sign;
        let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
        for (d, x) in v.iter_mut().enumerate() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let r = ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0;
            if d != axis {
                *x += eps * r;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// Two tight blobs, one around +e0 and one around +e1, so intra
    /// distances stay ≤ 0.05 and inter distances ≈ 1.
    fn two_blob_embeddings(per_blob: usize, eps: f64) -> BTreeMap<Ipv4Addr, Vec<f64>> {
        let mut map = BTreeMap::new();
        for i in 0..per_blob {
            map.insert(ip(i as u32 + 1), blob_vec(8, 0, 1.0, eps, i as u64));
        }
        for i in 0..per_blob {
            map.insert(ip(i as u32 + 1000), blob_vec(8, 1, 1.0, eps, i as u64 + 500));
        }
        map
    }

    /// Direction far from both blob axes and from its siblings; attaches to
    /// the hierarchy above the blob-to-blob merge.
    fn isolated_vec(k: usize) -> Vec<f64> {
        let mut v = vec![0.0; 8];
        v[0] = -1.0;
        v[1] = -1.0;
        v[2 + k] = 2.0;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    #[test]
    fn matrix_single_sender_is_zero() {
        let mut map = BTreeMap::new();
        map.insert(ip(1), vec![1.0, 0.0]);
        let m = pairwise_cosine_matrix(&map).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.dist(0, 0), 0.0);
    }

    #[test]
    fn matrix_identical_vectors_have_zero_distance() {
        let mut map = BTreeMap::new();
        map.insert(ip(1), vec![1.0, 2.0]);
        map.insert(ip(2), vec![1.0, 2.0]);
        let m = pairwise_cosine_matrix(&map).unwrap();
        assert!(m.dist(0, 1).abs() < 1e-15);
    }

    #[test]
    fn matrix_matches_scalar_recomputation() {
        let map = two_blob_embeddings(5, 0.3);
        let vecs: Vec<&Vec<f64>> = map.values().collect();
        let m = pairwise_cosine_matrix(&map).unwrap();
        for i in 0..m.len() {
            for j in 0..m.len() {
                let expect = if i == j { 0.0 } else { cosine_distance(vecs[i], vecs[j]).unwrap() };
                assert!((m.dist(i, j) - expect).abs() < 1e-12);
                assert!((m.dist(i, j) - m.dist(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matrix_rejects_zero_vector() {
        let mut map = BTreeMap::new();
        map.insert(ip(1), vec![0.0, 0.0]);
        assert!(matches!(pairwise_cosine_matrix(&map), Err(ClusterError::ZeroVector(_))));
    }

    #[test]
    fn lazy_matches_dense() {
        let map = two_blob_embeddings(6, 0.2);
        let dense = pairwise_cosine_matrix(&map).unwrap();
        let lazy = CosineLazy::new(&map).unwrap();
        for i in 0..dense.len() {
            for j in 0..dense.len() {
                assert!((dense.dist(i, j) - lazy.dist(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_blobs_give_two_clusters_no_noise() {
        let map = two_blob_embeddings(20, 0.02);
        let m = pairwise_cosine_matrix(&map).unwrap();
        let p = hdbscan(&m, 10, day()).unwrap();
        assert_eq!(p.num_clusters(), 2, "expected 2 clusters, got {:?}", p.clusters.keys());
        assert!(p.noise.is_empty());
        assert_eq!(p.clusters[&0].len(), 20);
        assert_eq!(p.clusters[&1].len(), 20);
    }

    #[test]
    fn undersized_input_goes_to_noise() {
        let mut map = BTreeMap::new();
        for i in 0..5 {
            map.insert(ip(i + 1), blob_vec(8, 0, 1.0, 0.01, i as u64));
        }
        let m = pairwise_cosine_matrix(&map).unwrap();
        let p = hdbscan(&m, 10, day()).unwrap();
        assert!(p.undersized_input);
        assert_eq!(p.num_clusters(), 0);
        assert_eq!(p.noise.len(), 5);
    }

    #[test]
    fn isolated_points_become_noise() {
        let mut map = two_blob_embeddings(20, 0.02);
        for k in 0..5usize {
            map.insert(ip(5000 + k as u32), isolated_vec(k));
        }
        let m = pairwise_cosine_matrix(&map).unwrap();

        // Planted geometry sanity: every isolated point sits farther from
        // the blobs than the blobs sit from each other, so the isolated
        // component joins the hierarchy above the blob-to-blob merge.
        for k in 0..5usize {
            let i = m.sender_index(ip(5000 + k as u32)).unwrap();
            for j in 0..m.len() {
                let other = m.senders()[j];
                if i != j && !(5000..5005).contains(&(u32::from(other) - 0x0a00_0000)) {
                    assert!(m.dist(i, j) > 1.2, "isolated point too close: {}", m.dist(i, j));
                }
            }
        }

        let p = hdbscan(&m, 10, day()).unwrap();
        assert_eq!(p.num_clusters(), 2);
        assert_eq!(p.noise.len(), 5);
        for k in 0..5usize {
            assert!(p.noise.contains(&ip(5000 + k as u32)));
        }
    }

    #[test]
    fn min_cluster_size_below_two_is_config_error() {
        let map = two_blob_embeddings(3, 0.02);
        let m = pairwise_cosine_matrix(&map).unwrap();
        assert!(matches!(hdbscan(&m, 1, day()), Err(ClusterError::MinClusterSize(1))));
    }

    #[test]
    fn silhouette_two_tight_blobs_scores_high() {
        let map = two_blob_embeddings(20, 0.02);
        let m = pairwise_cosine_matrix(&map).unwrap();
        let p = hdbscan(&m, 10, day()).unwrap();
        let rep = silhouette(&p, &m).unwrap();
        assert!(rep.defined);
        for (&c, &mean) in &rep.per_cluster_mean {
            assert!(mean > 0.9, "cluster {c} silhouette mean {mean} too low");
        }
        for &v in rep.values.values() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn silhouette_undefined_for_single_cluster() {
        let mut p = Partition::new(day());
        p.clusters.insert(0, [ip(1), ip(2)].into());
        let mut map = BTreeMap::new();
        map.insert(ip(1), vec![1.0, 0.0]);
        map.insert(ip(2), vec![0.9, 0.1]);
        let m = pairwise_cosine_matrix(&map).unwrap();
        let rep = silhouette(&p, &m).unwrap();
        assert!(!rep.defined);
        assert!(rep.day_mean.is_none());
    }

    #[test]
    fn silhouette_matches_hand_computation() {
        // 4 points, 2 clusters: {1,2} near +x, {3,4} near +y.
        let mut map = BTreeMap::new();
        map.insert(ip(1), vec![1.0, 0.0]);
        map.insert(ip(2), vec![0.9, 0.1]);
        map.insert(ip(3), vec![0.0, 1.0]);
        map.insert(ip(4), vec![0.1, 0.9]);
        let m = pairwise_cosine_matrix(&map).unwrap();
        let mut p = Partition::new(day());
        p.clusters.insert(0, [ip(1), ip(2)].into());
        p.clusters.insert(1, [ip(3), ip(4)].into());
        let rep = silhouette(&p, &m).unwrap();

        // Manual formula application for every sample.
        let idx_of = |s: Ipv4Addr| m.sender_index(s).unwrap();
        let groups: [(Ipv4Addr, Ipv4Addr, [Ipv4Addr; 2]); 4] = [
            (ip(1), ip(2), [ip(3), ip(4)]),
            (ip(2), ip(1), [ip(3), ip(4)]),
            (ip(3), ip(4), [ip(1), ip(2)]),
            (ip(4), ip(3), [ip(1), ip(2)]),
        ];
        for (me, mate, others) in groups {
            let a = m.dist(idx_of(me), idx_of(mate));
            let b = (m.dist(idx_of(me), idx_of(others[0])) + m.dist(idx_of(me), idx_of(others[1]))) / 2.0;
            let expect = (b - a) / a.max(b);
            assert!((rep.values[&me] - expect).abs() < 1e-12, "sample {me}");
        }
    }

    #[test]
    fn partition_permutation_invariance() {
        // The same vectors assigned to addresses in reverse order must give
        // the same partition as a set of vector-id sets.
        let map = two_blob_embeddings(12, 0.02);
        let vecs: Vec<Vec<f64>> = map.values().cloned().collect();
        let m = pairwise_cosine_matrix(&map).unwrap();
        let p = hdbscan(&m, 5, day()).unwrap();

        let mut reversed: BTreeMap<Ipv4Addr, Vec<f64>> = BTreeMap::new();
        for (k, v) in vecs.iter().enumerate() {
            reversed.insert(ip(9000 - k as u32), v.clone());
        }
        let m2 = pairwise_cosine_matrix(&reversed).unwrap();
        let p2 = hdbscan(&m2, 5, day()).unwrap();

        let orig_senders: Vec<Ipv4Addr> = map.keys().copied().collect();
        let sets1: BTreeSet<BTreeSet<usize>> = p
            .clusters
            .values()
            .map(|ms| ms.iter().map(|s| orig_senders.iter().position(|x| x == s).unwrap()).collect())
            .collect();
        // Vector k lives at address base+9000−k in the reversed map.
        let sets2: BTreeSet<BTreeSet<usize>> = p2
            .clusters
            .values()
            .map(|ms| ms.iter().map(|s| (0x0a00_0000 + 9000 - u32::from(*s)) as usize).collect())
            .collect();
        assert_eq!(sets1, sets2);
    }

    #[test]
    fn snapshot_round_trip() {
        let map = two_blob_embeddings(10, 0.02);
        let m = pairwise_cosine_matrix(&map).unwrap();
        let mut p = hdbscan(&m, 5, day()).unwrap();
        p.noise.insert(ip(7777));
        let mut buf = Vec::new();
        write_partition(&p, &mut buf).unwrap();
        let parts = read_partitions(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].day, p.day);
        assert_eq!(parts[0].clusters, p.clusters);
        assert_eq!(parts[0].noise, p.noise);

        // Serialization is canonical: write(read(x)) == x.
        let mut buf2 = Vec::new();
        write_partition(&parts[0], &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn snapshot_rejects_duplicates() {
        let text = format!("{SNAPSHOT_HEADER}\n2021-06-01,10.0.0.1,0\n2021-06-01,10.0.0.1,1\n");
        assert!(matches!(
            read_partitions(std::io::Cursor::new(text.into_bytes())),
            Err(ClusterError::Snapshot { line: 3, .. })
        ));
    }
}
