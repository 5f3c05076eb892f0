//! Sender embeddings trained with skip-gram plus negative sampling (SGNS)
//! over the daily corpus.
//!
//! Training is incremental: each day's model is warm-started from the
//! previous day's vectors, the vocabulary is append-only, and senders that
//! do not appear in a day's corpus are left bitwise untouched. Negatives are
//! drawn from the current corpus's unigram distribution raised to the 3/4
//! power, so absent senders are never sampled and never updated.
//!
//! Two training modes exist: the default single-threaded mode is
//! bit-reproducible given the model seed; the sharded mode trades
//! determinism for throughput by letting threads race on relaxed atomic
//! cells, the usual lock-free SGD arrangement.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;

const CHECKPOINT_MAGIC: &[u8; 8] = b"STEMBED1";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("sender {0} is not in the vocabulary")]
    UnknownSender(Ipv4Addr),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("checkpoint i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Skip-gram training parameters. Only the dimension comes from the problem
/// setting; the rest are the conventional SGNS settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { window: 5, negatives: 5, epochs: 1, lr_start: 0.025, lr_end: 1e-4 }
    }
}

/// How the pair updates are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// In-order updates, bit-reproducible given the seed.
    Deterministic,
    /// Sentence shards trained by `threads` workers with unsynchronized
    /// (relaxed-atomic) updates; result is not reproducible.
    Sharded { threads: usize },
}

/// Outcome of one incremental training call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainReport {
    pub pairs: u64,
    pub new_senders: usize,
    /// Set when the corpus had no sentences; the model was left unchanged.
    pub empty_corpus: bool,
}

/// Cumulative unigram^(3/4) distribution over the senders of the last
/// trained corpus; negatives are sampled from it by binary search.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnigramTable {
    /// Vocabulary indices with nonzero count in the corpus.
    pub entries: Vec<u32>,
    /// Matching cumulative weights, strictly increasing.
    pub cumulative: Vec<f64>,
}

impl UnigramTable {
    fn from_counts(counts: &HashMap<usize, u64>) -> Self {
        let mut items: Vec<(usize, u64)> = counts.iter().map(|(&i, &c)| (i, c)).collect();
        items.sort_unstable();
        let mut entries = Vec::with_capacity(items.len());
        let mut cumulative = Vec::with_capacity(items.len());
        let mut acc = 0.0;
        for (idx, count) in items {
            acc += (count as f64).powf(0.75);
            entries.push(idx as u32);
            cumulative.push(acc);
        }
        UnigramTable { entries, cumulative }
    }

    fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u = rng.random::<f64>() * self.total();
        let pos = self.cumulative.partition_point(|&c| c <= u);
        let pos = pos.min(self.entries.len() - 1);
        self.entries[pos] as usize
    }

    fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Vocabulary of senders with input (embedding) and output (context)
/// vectors, trained incrementally across days.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    dim: usize,
    seed: u64,
    train_calls: u64,
    senders: Vec<Ipv4Addr>,
    index: HashMap<Ipv4Addr, usize>,
    /// `|vocab| × dim`, row-major. Rows are the sender embeddings.
    input: Vec<f64>,
    /// `|vocab| × dim`, row-major context weights.
    output: Vec<f64>,
    pub unigram: UnigramTable,
}

/// Create an empty model. Deterministic given the seed.
pub fn init_model(dim: usize, seed: u64) -> Result<EmbeddingModel, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::ZeroDimension);
    }
    Ok(EmbeddingModel {
        dim,
        seed,
        train_calls: 0,
        senders: Vec::new(),
        index: HashMap::new(),
        input: Vec::new(),
        output: Vec::new(),
        unigram: UnigramTable::default(),
    })
}

impl EmbeddingModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_len(&self) -> usize {
        self.senders.len()
    }

    pub fn contains(&self, sender: Ipv4Addr) -> bool {
        self.index.contains_key(&sender)
    }

    /// Senders in vocabulary (insertion) order.
    pub fn senders(&self) -> &[Ipv4Addr] {
        &self.senders
    }

    /// The embedding of a sender: its input vector.
    pub fn embedding(&self, sender: Ipv4Addr) -> Result<&[f64], EmbedError> {
        let &i = self.index.get(&sender).ok_or(EmbedError::UnknownSender(sender))?;
        Ok(&self.input[i * self.dim..(i + 1) * self.dim])
    }

    fn output_row(&self, i: usize) -> &[f64] {
        &self.output[i * self.dim..(i + 1) * self.dim]
    }

    /// Add unseen corpus senders to the vocabulary in first-occurrence
    /// order. New input rows are uniform in [-0.5/dim, 0.5/dim]; new output
    /// rows are zero.
    fn grow_vocab(&mut self, corpus: &Corpus, rng: &mut impl Rng) -> usize {
        let mut added = 0;
        for sentence in &corpus.sentences {
            for &s in &sentence.senders {
                if self.index.contains_key(&s) {
                    continue;
                }
                let idx = self.senders.len();
                self.senders.push(s);
                self.index.insert(s, idx);
                let half = 0.5 / self.dim as f64;
                for _ in 0..self.dim {
                    self.input.push(rng.random::<f64>() * 2.0 * half - half);
                }
                self.output.extend(std::iter::repeat_n(0.0, self.dim));
                added += 1;
            }
        }
        added
    }
}

/// Sigmoid in f64; no lookup-table shortcut so the gradient check is exact.
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SGNS objective for one (center, context, negatives) triple:
/// `log σ(u·w_pos) + Σ_k log σ(−u·w_k)`.
pub fn sgns_objective(center: &[f64], pos: &[f64], negs: &[&[f64]]) -> f64 {
    let mut obj = sigmoid(dot(center, pos)).ln();
    for neg in negs {
        obj += sigmoid(-dot(center, neg)).ln();
    }
    obj
}

/// Analytic gradients of [`sgns_objective`] with respect to the center, the
/// positive context and each negative vector, in that order.
pub fn sgns_gradients(
    center: &[f64],
    pos: &[f64],
    negs: &[&[f64]],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let dim = center.len();
    let mut d_center = vec![0.0; dim];
    let g_pos = 1.0 - sigmoid(dot(center, pos));
    let d_pos: Vec<f64> = center.iter().map(|&c| g_pos * c).collect();
    for (d, &p) in d_center.iter_mut().zip(pos) {
        *d += g_pos * p;
    }
    let mut d_negs = Vec::with_capacity(negs.len());
    for neg in negs {
        let g_neg = -sigmoid(dot(center, neg));
        d_negs.push(center.iter().map(|&c| g_neg * c).collect());
        for (d, &n) in d_center.iter_mut().zip(neg.iter()) {
            *d += g_neg * n;
        }
    }
    (d_center, d_pos, d_negs)
}

/// Count (center, context) pairs one epoch of the corpus produces.
fn count_pairs(corpus: &Corpus, window: usize) -> u64 {
    let mut pairs = 0u64;
    for sentence in &corpus.sentences {
        let len = sentence.senders.len();
        for i in 0..len {
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(len - 1);
            pairs += (hi - lo) as u64;
        }
    }
    pairs
}

/// Reusable buffers for the pair update loop.
#[derive(Default)]
struct PairScratch {
    center: Vec<f64>,
    center_grad: Vec<f64>,
    updates: Vec<(usize, f64)>,
}

/// One skip-gram update. Applies the analytic gradient of
/// [`sgns_objective`] scaled by `lr`, with the simultaneous-step convention:
/// every coefficient is computed from pre-step values, including when a
/// negative index repeats.
fn apply_pair(
    input: &mut [f64],
    output: &mut [f64],
    dim: usize,
    center: usize,
    context: usize,
    negatives: &[usize],
    lr: f64,
    scratch: &mut PairScratch,
) {
    scratch.center.clear();
    scratch.center.extend_from_slice(&input[center * dim..(center + 1) * dim]);
    let u = &scratch.center;

    scratch.updates.clear();
    let w = &output[context * dim..(context + 1) * dim];
    scratch.updates.push((context, lr * (1.0 - sigmoid(dot(u, w)))));
    for &n in negatives {
        if n == context {
            continue;
        }
        let w = &output[n * dim..(n + 1) * dim];
        scratch.updates.push((n, -lr * sigmoid(dot(u, w))));
    }

    scratch.center_grad.resize(dim, 0.0);
    scratch.center_grad.fill(0.0);
    for &(idx, g) in &scratch.updates {
        let w = &output[idx * dim..(idx + 1) * dim];
        for d in 0..dim {
            scratch.center_grad[d] += g * w[d];
        }
    }
    for &(idx, g) in &scratch.updates {
        let w = &mut output[idx * dim..(idx + 1) * dim];
        for d in 0..dim {
            w[d] += g * u[d];
        }
    }
    let u = &mut input[center * dim..(center + 1) * dim];
    for d in 0..dim {
        u[d] += scratch.center_grad[d];
    }
}

/// Train the model on one day's corpus, warm-starting from its current
/// state. Senders absent from the corpus are not touched.
pub fn train_incremental(
    model: &mut EmbeddingModel,
    corpus: &Corpus,
    params: &TrainParams,
    mode: TrainMode,
) -> TrainReport {
    model.train_calls += 1;
    // Each call gets an independent deterministic stream.
    let call_seed = model.seed ^ model.train_calls.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(call_seed);

    if corpus.is_empty() {
        return TrainReport { pairs: 0, new_senders: 0, empty_corpus: true };
    }

    let new_senders = model.grow_vocab(corpus, &mut rng);

    let mut counts: HashMap<usize, u64> = HashMap::new();
    let mut indexed: Vec<Vec<usize>> = Vec::with_capacity(corpus.sentences.len());
    for sentence in &corpus.sentences {
        let idxs: Vec<usize> = sentence.senders.iter().map(|s| model.index[s]).collect();
        for &i in &idxs {
            *counts.entry(i).or_insert(0) += 1;
        }
        indexed.push(idxs);
    }
    model.unigram = UnigramTable::from_counts(&counts);

    let total_pairs = count_pairs(corpus, params.window) * params.epochs as u64;
    if total_pairs == 0 || model.unigram.is_empty() {
        return TrainReport { pairs: 0, new_senders, empty_corpus: false };
    }

    match mode {
        TrainMode::Deterministic => {
            train_serial(model, &indexed, params, total_pairs, &mut rng);
        }
        TrainMode::Sharded { threads } => {
            train_sharded(model, &indexed, params, total_pairs, call_seed, threads.max(1));
        }
    }

    TrainReport { pairs: total_pairs, new_senders, empty_corpus: false }
}

fn train_serial(
    model: &mut EmbeddingModel,
    sentences: &[Vec<usize>],
    params: &TrainParams,
    total_pairs: u64,
    rng: &mut impl Rng,
) {
    let dim = model.dim;
    let lr_span = params.lr_end - params.lr_start;
    let mut done = 0u64;
    let mut scratch = PairScratch::default();
    let mut negs = Vec::with_capacity(params.negatives);

    for _ in 0..params.epochs {
        for idxs in sentences {
            let len = idxs.len();
            for (i, &center) in idxs.iter().enumerate() {
                let lo = i.saturating_sub(params.window);
                let hi = (i + params.window).min(len - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let lr = params.lr_start + lr_span * (done as f64 / total_pairs as f64);
                    negs.clear();
                    for _ in 0..params.negatives {
                        negs.push(model.unigram.sample(rng));
                    }
                    apply_pair(
                        &mut model.input,
                        &mut model.output,
                        dim,
                        center,
                        idxs[j],
                        &negs,
                        lr,
                        &mut scratch,
                    );
                    done += 1;
                }
            }
        }
    }
}

/// Relaxed-atomic f64 cell, the race-tolerant storage for sharded training.
struct Cell(AtomicU64);

impl Cell {
    fn get(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Relaxed))
    }

    fn set(&self, v: f64) {
        self.0.store(v.to_bits(), Ordering::Relaxed);
    }
}

fn train_sharded(
    model: &mut EmbeddingModel,
    sentences: &[Vec<usize>],
    params: &TrainParams,
    total_pairs: u64,
    call_seed: u64,
    threads: usize,
) {
    let dim = model.dim;
    let input: Vec<Cell> = model.input.iter().map(|&v| Cell(AtomicU64::new(v.to_bits()))).collect();
    let output: Vec<Cell> = model.output.iter().map(|&v| Cell(AtomicU64::new(v.to_bits()))).collect();
    let unigram = &model.unigram;
    let shard_len = sentences.len().div_ceil(threads);

    std::thread::scope(|scope| {
        for (t, shard) in sentences.chunks(shard_len.max(1)).enumerate() {
            let input = &input;
            let output = &output;
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(call_seed ^ (t as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F));
                let lr_span = params.lr_end - params.lr_start;
                let mut done = 0u64;
                let mut center_grad = vec![0.0; dim];
                let mut u = vec![0.0; dim];
                let mut w = vec![0.0; dim];
                let shard_pairs = (total_pairs / threads as u64).max(1);

                for _ in 0..params.epochs {
                    for idxs in shard {
                        let len = idxs.len();
                        for (i, &center) in idxs.iter().enumerate() {
                            let lo = i.saturating_sub(params.window);
                            let hi = (i + params.window).min(len - 1);
                            for j in lo..=hi {
                                if j == i {
                                    continue;
                                }
                                let lr = params.lr_start
                                    + lr_span * ((done.min(shard_pairs)) as f64 / shard_pairs as f64);
                                for d in 0..dim {
                                    u[d] = input[center * dim + d].get();
                                }
                                center_grad.fill(0.0);
                                let context = idxs[j];
                                for k in 0..=params.negatives {
                                    let (target, label) = if k == 0 {
                                        (context, 1.0)
                                    } else {
                                        let n = unigram.sample(&mut rng);
                                        if n == context {
                                            continue;
                                        }
                                        (n, 0.0)
                                    };
                                    for d in 0..dim {
                                        w[d] = output[target * dim + d].get();
                                    }
                                    let g = lr * (label - sigmoid(dot(&u, &w)));
                                    for d in 0..dim {
                                        center_grad[d] += g * w[d];
                                        output[target * dim + d].set(w[d] + g * u[d]);
                                    }
                                }
                                for d in 0..dim {
                                    input[center * dim + d].set(u[d] + center_grad[d]);
                                }
                                done += 1;
                            }
                        }
                    }
                }
            });
        }
    });

    for (dst, cell) in model.input.iter_mut().zip(&input) {
        *dst = cell.get();
    }
    for (dst, cell) in model.output.iter_mut().zip(&output) {
        *dst = cell.get();
    }
}

/// Cosine distance `1 − u·v/(‖u‖‖v‖)`, clamped to [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, EmbedError> {
    assert_eq!(u.len(), v.len(), "cosine distance over mismatched dimensions");
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((1.0 - dot(u, v) / (nu * nv)).clamp(0.0, 2.0))
}

// --- checkpoint i/o ---------------------------------------------------------
//
// Layout (little-endian throughout):
//   magic "STEMBED1" | dim u32 | seed u64 | train_calls u64 | vocab_len u64
//   vocab_len × 4-byte IPv4 octets (index order)
//   vocab_len × dim f64 input matrix, row-major
//   vocab_len × dim f64 output matrix, row-major
//   table_len u64 | table_len × (index u32, cumulative f64)
//
// The f64 payloads are raw bit patterns, so load(save(m)) == m bitwise.

impl EmbeddingModel {
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.train_calls.to_le_bytes())?;
        w.write_all(&(self.senders.len() as u64).to_le_bytes())?;
        for s in &self.senders {
            w.write_all(&s.octets())?;
        }
        for v in &self.input {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.output {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.unigram.entries.len() as u64).to_le_bytes())?;
        for (&e, &c) in self.unigram.entries.iter().zip(&self.unigram.cumulative) {
            w.write_all(&e.to_le_bytes())?;
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EmbeddingModel, EmbedError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(EmbedError::BadCheckpoint("wrong magic".into()));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(EmbedError::BadCheckpoint("zero dimension".into()));
        }
        let seed = read_u64(&mut r)?;
        let train_calls = read_u64(&mut r)?;
        let vocab_len = read_u64(&mut r)? as usize;

        let mut senders = Vec::with_capacity(vocab_len);
        let mut index = HashMap::with_capacity(vocab_len);
        for i in 0..vocab_len {
            let mut oct = [0u8; 4];
            r.read_exact(&mut oct)?;
            let ip = Ipv4Addr::from(oct);
            if index.insert(ip, i).is_some() {
                return Err(EmbedError::BadCheckpoint(format!("duplicate sender {ip}")));
            }
            senders.push(ip);
        }
        let input = read_f64s(&mut r, vocab_len * dim)?;
        let output = read_f64s(&mut r, vocab_len * dim)?;

        let table_len = read_u64(&mut r)? as usize;
        let mut entries = Vec::with_capacity(table_len);
        let mut cumulative = Vec::with_capacity(table_len);
        for _ in 0..table_len {
            let e = read_u32(&mut r)?;
            if e as usize >= vocab_len {
                return Err(EmbedError::BadCheckpoint(format!("table index {e} out of range")));
            }
            entries.push(e);
            cumulative.push(read_f64(&mut r)?);
        }

        Ok(EmbeddingModel {
            dim,
            seed,
            train_calls,
            senders,
            index,
            input,
            output,
            unigram: UnigramTable { entries, cumulative },
        })
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64(r)?);
    }
    Ok(out)
}
