//! Interaction data: ingestion, 5-core filtering, leave-one-out splits,
//! padded batches, on-disk persistence, and the synthetic Markov corpus
//! used as an oracle substrate by the test suite.
//!
//! Internal item ids are dense and 1-based; id 0 is the padding id and the
//! frozen pad row of the embedding table. Repeated interactions are kept.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CadirecError, Result};
use crate::rng::SeedStream;

/// Magic string at the head of the binary sequence file; bump on layout
/// changes. Layout after the magic: `u32 user_count`, then per user
/// `u32 len` followed by `len` item ids as `u32`, all little-endian.
pub const SEQ_MAGIC: &[u8; 8] = b"CDRSEQ1\0";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Tsv,
}

impl InputFormat {
    fn separator(&self) -> char {
        match self {
            InputFormat::Csv => ',',
            InputFormat::Tsv => '\t',
        }
    }
}

/// Per-user chronological item sequences with dense internal ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionCorpus {
    /// External user keys, index = internal user index.
    pub users: Vec<String>,
    /// Item ids in `[1, vocab_size]`, chronological per user.
    pub sequences: Vec<Vec<u32>>,
    pub vocab_size: usize,
    /// External item keys; index = internal id, index 0 is the pad slot.
    pub item_keys: Vec<String>,
}

impl InteractionCorpus {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn avg_length(&self) -> f64 {
        if self.users.is_empty() {
            0.0
        } else {
            self.num_interactions() as f64 / self.num_users() as f64
        }
    }

    /// Fraction of the user × item grid that is observed.
    pub fn density(&self) -> f64 {
        if self.users.is_empty() || self.vocab_size == 0 {
            0.0
        } else {
            self.num_interactions() as f64 / (self.num_users() * self.vocab_size) as f64
        }
    }

    /// Panics on violated structural invariants; used by tests and after
    /// every filtering step.
    pub fn check_invariants(&self) {
        assert_eq!(self.item_keys.len(), self.vocab_size + 1);
        for seq in &self.sequences {
            for &it in seq {
                assert!(
                    it >= 1 && (it as usize) <= self.vocab_size,
                    "id out of range"
                );
            }
        }
    }

    pub fn external_item(&self, id: u32) -> &str {
        &self.item_keys[id as usize]
    }
}

/// Parse `user,item,timestamp` (or `user,item,rating,timestamp`; the rating
/// column is ignored) rows and build chronological sequences. Ids are
/// remapped to a dense internal range in order of first appearance;
/// duplicates are kept as repeat interactions.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionCorpus> {
    let text = fs::read_to_string(path)?;
    load_interactions_str(&text, format)
}

pub fn load_interactions_str(text: &str, format: InputFormat) -> Result<InteractionCorpus> {
    let sep = format.separator();
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        let (user, item, ts_str) = match fields.len() {
            3 => (fields[0], fields[1], fields[2]),
            4 => (fields[0], fields[1], fields[3]),
            n => {
                return Err(CadirecError::Parse {
                    line: i + 1,
                    message: format!("expected 3 or 4 fields, found {n}"),
                })
            }
        };
        let ts: f64 = ts_str.trim().parse().map_err(|_| CadirecError::Parse {
            line: i + 1,
            message: format!("unparseable timestamp {ts_str:?}"),
        })?;
        if user.is_empty() || item.is_empty() {
            return Err(CadirecError::Parse {
                line: i + 1,
                message: "empty user or item field".into(),
            });
        }
        rows.push((user.to_string(), item.to_string(), ts));
    }
    if rows.is_empty() {
        return Err(CadirecError::EmptyCorpus("no rows in input".into()));
    }

    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut item_keys: Vec<String> = vec!["<pad>".to_string()];
    // (timestamp, arrival order, item) per user; the stable tiebreak on file
    // position makes ingestion deterministic for equal timestamps
    let mut per_user: Vec<Vec<(f64, usize, u32)>> = Vec::new();
    for (order, (u, it, ts)) in rows.into_iter().enumerate() {
        let ui = *user_index.entry(u.clone()).or_insert_with(|| {
            users.push(u);
            per_user.push(Vec::new());
            users.len() - 1
        });
        let ii = *item_index.entry(it.clone()).or_insert_with(|| {
            item_keys.push(it);
            (item_keys.len() - 1) as u32
        });
        per_user[ui].push((ts, order, ii));
    }
    let sequences = per_user
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            v.into_iter().map(|(_, _, it)| it).collect()
        })
        .collect();
    let corpus = InteractionCorpus {
        users,
        sequences,
        vocab_size: item_keys.len() - 1,
        item_keys,
    };
    corpus.check_invariants();
    Ok(corpus)
}

/// Alternate user/item pruning (< 5 interactions) to a fixed point, then
/// remap item ids densely. Idempotent.
pub fn five_core_filter(corpus: &InteractionCorpus) -> Result<InteractionCorpus> {
    k_core_filter(corpus, 5)
}

pub fn k_core_filter(corpus: &InteractionCorpus, k: usize) -> Result<InteractionCorpus> {
    let mut sequences: Vec<Vec<u32>> = corpus.sequences.clone();
    let mut user_alive: Vec<bool> = vec![true; sequences.len()];
    let mut item_alive: Vec<bool> = vec![true; corpus.vocab_size + 1];

    loop {
        let mut changed = false;
        for (u, seq) in sequences.iter_mut().enumerate() {
            if !user_alive[u] {
                continue;
            }
            let before = seq.len();
            seq.retain(|&it| item_alive[it as usize]);
            if seq.len() != before {
                changed = true;
            }
        }
        for (u, seq) in sequences.iter().enumerate() {
            if user_alive[u] && seq.len() < k {
                user_alive[u] = false;
                changed = true;
            }
        }
        let mut counts = vec![0usize; corpus.vocab_size + 1];
        for (u, seq) in sequences.iter().enumerate() {
            if user_alive[u] {
                for &it in seq {
                    counts[it as usize] += 1;
                }
            }
        }
        for it in 1..=corpus.vocab_size {
            if item_alive[it] && counts[it] < k {
                item_alive[it] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // dense remap of surviving items, ordered by old id
    let mut new_id = vec![0u32; corpus.vocab_size + 1];
    let mut item_keys = vec![corpus.item_keys[0].clone()];
    for it in 1..=corpus.vocab_size {
        if item_alive[it] {
            item_keys.push(corpus.item_keys[it].clone());
            new_id[it] = (item_keys.len() - 1) as u32;
        }
    }
    let mut users = Vec::new();
    let mut out_sequences: Vec<Vec<u32>> = Vec::new();
    for (u, seq) in sequences.into_iter().enumerate() {
        if user_alive[u] {
            users.push(corpus.users[u].clone());
            out_sequences.push(seq.into_iter().map(|it| new_id[it as usize]).collect());
        }
    }
    if users.is_empty() {
        return Err(CadirecError::EmptyAfterFilter);
    }
    let filtered = InteractionCorpus {
        users,
        sequences: out_sequences,
        vocab_size: item_keys.len() - 1,
        item_keys,
    };
    filtered.check_invariants();
    Ok(filtered)
}

/// Leave-one-out split: per user, the last interaction is the test target,
/// the second-to-last the validation target, and the rest (truncated to the
/// most recent `max_len`) the training prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train_inputs: Vec<Vec<u32>>,
    pub valid_target: Vec<u32>,
    pub test_target: Vec<u32>,
    pub max_len: usize,
    /// Corpus user index per split row.
    pub user_indices: Vec<usize>,
    /// Users dropped because their sequence was shorter than 3.
    pub skipped_users: usize,
    pub vocab_size: usize,
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.train_inputs.len()
    }

    /// Model input for ranking the validation target.
    pub fn valid_input(&self, u: usize) -> Vec<u32> {
        self.train_inputs[u].clone()
    }

    /// Model input for ranking the test target: the training prefix plus the
    /// validation item, truncated to the most recent `max_len`.
    pub fn test_input(&self, u: usize) -> Vec<u32> {
        let mut v = self.train_inputs[u].clone();
        v.push(self.valid_target[u]);
        if v.len() > self.max_len {
            let cut = v.len() - self.max_len;
            v.drain(..cut);
        }
        v
    }

    /// Stream of padded batches covering every user exactly once, in a
    /// seed-determined order.
    pub fn batches(&self, batch_size: usize, seed: &SeedStream) -> BatchIter<'_> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let mut order_rng = seed.clone();
        BatchIter {
            split: self,
            order: order_rng.permutation(self.num_users()),
            batch_size,
            next: 0,
        }
    }
}

pub fn build_splits(corpus: &InteractionCorpus, max_len: usize) -> Result<SplitDataset> {
    if max_len == 0 {
        return Err(CadirecError::Config("max_len must be >= 1".into()));
    }
    let mut split = SplitDataset {
        train_inputs: Vec::new(),
        valid_target: Vec::new(),
        test_target: Vec::new(),
        max_len,
        user_indices: Vec::new(),
        skipped_users: 0,
        vocab_size: corpus.vocab_size,
    };
    for (u, seq) in corpus.sequences.iter().enumerate() {
        if seq.len() < 3 {
            split.skipped_users += 1;
            continue;
        }
        let n = seq.len();
        let mut prefix: Vec<u32> = seq[..n - 2].to_vec();
        if prefix.len() > max_len {
            let cut = prefix.len() - max_len;
            prefix.drain(..cut);
        }
        split.train_inputs.push(prefix);
        split.valid_target.push(seq[n - 2]);
        split.test_target.push(seq[n - 1]);
        split.user_indices.push(u);
    }
    if split.skipped_users > 0 {
        log::warn!(
            "build_splits: skipped {} users with fewer than 3 interactions",
            split.skipped_users
        );
    }
    if split.train_inputs.is_empty() {
        return Err(CadirecError::EmptyCorpus(
            "no users with >= 3 interactions".into(),
        ));
    }
    Ok(split)
}

/// Left-padded fixed-width batch. Row layout `[N × n]`; position `n-1`
/// always holds the most recent item.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub items: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
    pub pad_mask: Vec<bool>,
    /// Split row index per batch row.
    pub rows: Vec<usize>,
}

impl SequenceBatch {
    /// Pad already-truncated item rows to width `n`.
    pub fn from_rows(rows_items: &[Vec<u32>], row_ids: Vec<usize>, n: usize) -> Self {
        let nb = rows_items.len();
        let mut items = vec![0u32; nb * n];
        let mut pad_mask = vec![false; nb * n];
        let mut lengths = Vec::with_capacity(nb);
        for (r, seq) in rows_items.iter().enumerate() {
            assert!(!seq.is_empty(), "batch row must hold at least one item");
            assert!(seq.len() <= n, "row longer than batch width");
            let len = seq.len();
            let off = n - len;
            for c in 0..off {
                pad_mask[r * n + c] = true;
            }
            items[r * n + off..(r + 1) * n].copy_from_slice(seq);
            lengths.push(len);
        }
        SequenceBatch {
            items,
            batch: nb,
            seq: n,
            lengths,
            pad_mask,
            rows: row_ids,
        }
    }

    pub fn row_items(&self, r: usize) -> &[u32] {
        &self.items[r * self.seq..(r + 1) * self.seq]
    }

    /// Strip padding; inverse of `from_rows` for a single row.
    pub fn unpadded_row(&self, r: usize) -> Vec<u32> {
        let off = self.seq - self.lengths[r];
        self.row_items(r)[off..].to_vec()
    }

    /// Same batch geometry with new row contents (used to encode views).
    pub fn with_rows(&self, new_rows: &[Vec<u32>]) -> SequenceBatch {
        assert_eq!(new_rows.len(), self.batch);
        let mut out = self.clone();
        for (r, seq) in new_rows.iter().enumerate() {
            assert_eq!(seq.len(), self.lengths[r], "view must preserve length");
            let off = self.seq - seq.len();
            out.items[r * self.seq + off..(r + 1) * self.seq].copy_from_slice(seq);
        }
        out
    }
}

pub struct BatchIter<'a> {
    split: &'a SplitDataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl<'a> Iterator for BatchIter<'a> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let ids: Vec<usize> = self.order[self.next..end].to_vec();
        self.next = end;
        let rows: Vec<Vec<u32>> = ids
            .iter()
            .map(|&u| self.split.train_inputs[u].clone())
            .collect();
        Some(SequenceBatch::from_rows(&rows, ids, self.split.max_len))
    }
}

// ---------------------------------------------------------------------------
// Synthetic Markov corpora
// ---------------------------------------------------------------------------

/// First-order chain over internal item ids `1..=vocab`. Stored row-major:
/// `transition[(from-1)*vocab + (to-1)]`, rows sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkovChain {
    pub vocab: usize,
    pub transition: Vec<f64>,
    pub kind: String,
}

impl MarkovChain {
    /// Random chain with strictly positive transition probabilities; rows
    /// are normalized Gamma draws (a Dirichlet sample). Lower `concentration`
    /// gives more peaked rows.
    pub fn random(vocab: usize, concentration: f64, stream: &mut SeedStream) -> Self {
        use rand_distr::{Distribution, Gamma};
        assert!(vocab >= 2);
        let gamma = Gamma::new(concentration, 1.0).expect("gamma params");
        let mut transition = vec![0.0f64; vocab * vocab];
        for row in 0..vocab {
            let mut sum = 0.0;
            for col in 0..vocab {
                // floor keeps every transition strictly positive so that
                // log-probability scores stay finite
                let v: f64 = gamma.sample(stream.rng()) + 1e-4;
                transition[row * vocab + col] = v;
                sum += v;
            }
            for col in 0..vocab {
                transition[row * vocab + col] /= sum;
            }
        }
        MarkovChain {
            vocab,
            transition,
            kind: "random".into(),
        }
    }

    /// Random chain with interest-block structure: items are grouped into
    /// `blocks` equal groups; a row keeps `1 - jump` of its mass on random
    /// within-block successors and sends `jump` to the next block (cyclic),
    /// over a small strictly-positive floor. Walks stay inside one block
    /// for long stretches, so a user's current block behaves like a
    /// persistent interest domain.
    pub fn block_random(
        vocab: usize,
        blocks: usize,
        concentration: f64,
        jump: f64,
        stream: &mut SeedStream,
    ) -> Self {
        use rand_distr::{Distribution, Gamma};
        assert!(blocks >= 2 && vocab % blocks == 0, "vocab must split into blocks");
        assert!((0.0..1.0).contains(&jump));
        let per = vocab / blocks;
        assert!(per >= 2, "blocks need at least two items");
        let gamma = Gamma::new(concentration, 1.0).expect("gamma params");
        let mut transition = vec![0.0f64; vocab * vocab];
        let floor = 1e-3 / vocab as f64;
        for i in 0..vocab {
            let b = i / per;
            let next_b = (b + 1) % blocks;
            let row = &mut transition[i * vocab..(i + 1) * vocab];
            for w in row.iter_mut() {
                *w = floor;
            }
            let mut draw_into = |block: usize, mass: f64, s: &mut SeedStream| {
                let mut weights = vec![0.0f64; per];
                let mut sum = 0.0;
                for w in weights.iter_mut() {
                    *w = gamma.sample(s.rng()) + 1e-3;
                    sum += *w;
                }
                for (j, w) in weights.iter().enumerate() {
                    row[block * per + j] += mass * w / sum;
                }
            };
            draw_into(b, 1.0 - jump, stream);
            draw_into(next_b, jump, stream);
            let total: f64 = row.iter().sum();
            for w in row.iter_mut() {
                *w /= total;
            }
        }
        MarkovChain {
            vocab,
            transition,
            kind: "block".into(),
        }
    }

    /// Deterministic single-cycle chain: item i transitions to i+1 (mod |V|)
    /// with probability 1. Every walk is a rotation of the fixed cycle.
    pub fn cycle(vocab: usize) -> Self {
        assert!(vocab >= 2);
        let mut transition = vec![0.0f64; vocab * vocab];
        for i in 0..vocab {
            transition[i * vocab + (i + 1) % vocab] = 1.0;
        }
        MarkovChain {
            vocab,
            transition,
            kind: "cycle".into(),
        }
    }

    pub fn prob(&self, from: u32, to: u32) -> f64 {
        self.transition[(from as usize - 1) * self.vocab + (to as usize - 1)]
    }

    pub fn logprob(&self, from: u32, to: u32) -> f64 {
        self.prob(from, to).ln()
    }

    /// Successor set with nonzero probability, internal ids.
    pub fn successors(&self, from: u32) -> Vec<u32> {
        (0..self.vocab)
            .filter(|&to| self.transition[(from as usize - 1) * self.vocab + to] > 0.0)
            .map(|to| (to + 1) as u32)
            .collect()
    }

    pub fn sample_next(&self, from: u32, stream: &mut SeedStream) -> u32 {
        let row =
            &self.transition[(from as usize - 1) * self.vocab..(from as usize) * self.vocab];
        let mut u: f64 = crate::scalar::Scalar::uniform01(stream.rng());
        for (to, &p) in row.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return (to + 1) as u32;
            }
        }
        self.vocab as u32
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Sample a corpus from a fixed random first-order chain. The chain is
/// returned alongside the corpus so later tests can score substitutions
/// against the true transition probabilities.
pub fn generate_markov_corpus(
    num_users: usize,
    vocab: usize,
    seed: u64,
    seq_len_range: (usize, usize),
    concentration: f64,
) -> (InteractionCorpus, MarkovChain) {
    assert!(vocab >= 4, "vocab must be >= 4");
    let stream = SeedStream::new(seed);
    let chain = MarkovChain::random(vocab, concentration, &mut stream.child(0));
    let corpus = sample_markov_corpus(num_users, &chain, seq_len_range, &mut stream.child(1));
    (corpus, chain)
}

/// Block-structured variant of [`generate_markov_corpus`].
pub fn generate_block_markov_corpus(
    num_users: usize,
    vocab: usize,
    blocks: usize,
    seed: u64,
    seq_len_range: (usize, usize),
    concentration: f64,
    jump: f64,
) -> (InteractionCorpus, MarkovChain) {
    let mut stream = SeedStream::new(seed);
    let chain = MarkovChain::block_random(vocab, blocks, concentration, jump, &mut stream.child(0));
    let corpus = sample_markov_corpus(num_users, &chain, seq_len_range, &mut stream.child(1));
    (corpus, chain)
}

/// Sample walks from an arbitrary chain (used with [`MarkovChain::cycle`]).
pub fn sample_markov_corpus(
    num_users: usize,
    chain: &MarkovChain,
    seq_len_range: (usize, usize),
    stream: &mut SeedStream,
) -> InteractionCorpus {
    let (lo, hi) = seq_len_range;
    assert!(lo >= 3 && hi >= lo, "length range must allow splits");
    let mut sequences = Vec::with_capacity(num_users);
    let mut users = Vec::with_capacity(num_users);
    for u in 0..num_users {
        let mut s = stream.child(u as u64);
        let len = lo + s.below(hi - lo + 1);
        let mut seq = Vec::with_capacity(len);
        let mut cur = (s.below(chain.vocab) + 1) as u32;
        seq.push(cur);
        for _ in 1..len {
            cur = chain.sample_next(cur, &mut s);
            seq.push(cur);
        }
        sequences.push(seq);
        users.push(format!("u{u:05}"));
    }
    let item_keys = std::iter::once("<pad>".to_string())
        .chain((1..=chain.vocab).map(|i| format!("i{i:04}")))
        .collect();
    let corpus = InteractionCorpus {
        users,
        sequences,
        vocab_size: chain.vocab,
        item_keys,
    };
    corpus.check_invariants();
    corpus
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    magic: String,
    vocab_size: usize,
    num_users: usize,
    users: Vec<String>,
    item_keys: Vec<String>,
}

const HEADER_MAGIC: &str = "cadirec-corpus-v1";

/// Write `corpus.json` (header, id maps) and `sequences.bin` (flat ids)
/// into `dir`.
pub fn save_corpus(corpus: &InteractionCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = CorpusHeader {
        magic: HEADER_MAGIC.to_string(),
        vocab_size: corpus.vocab_size,
        num_users: corpus.num_users(),
        users: corpus.users.clone(),
        item_keys: corpus.item_keys.clone(),
    };
    let mut hf = fs::File::create(dir.join("corpus.json"))?;
    serde_json::to_writer_pretty(&mut hf, &header)?;
    hf.write_all(b"\n")?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SEQ_MAGIC);
    buf.extend_from_slice(&(corpus.num_users() as u32).to_le_bytes());
    for seq in &corpus.sequences {
        buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for &it in seq {
            buf.extend_from_slice(&it.to_le_bytes());
        }
    }
    fs::write(dir.join("sequences.bin"), buf)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<InteractionCorpus> {
    let text = fs::read_to_string(dir.join("corpus.json"))?;
    let header: CorpusHeader = serde_json::from_str(&text)?;
    if header.magic != HEADER_MAGIC {
        return Err(CadirecError::Checkpoint(format!(
            "unknown corpus format {:?}",
            header.magic
        )));
    }
    let mut f = fs::File::open(dir.join("sequences.bin"))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..8] != SEQ_MAGIC {
        return Err(CadirecError::Checkpoint("bad sequence file magic".into()));
    }
    let mut off = 8;
    let read_u32 = |bytes: &[u8], off: &mut usize| -> Result<u32> {
        if *off + 4 > bytes.len() {
            return Err(CadirecError::Checkpoint("truncated sequence file".into()));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    let n_users = read_u32(&bytes, &mut off)? as usize;
    if n_users != header.num_users {
        return Err(CadirecError::Checkpoint(
            "header/sequence user count mismatch".into(),
        ));
    }
    let mut sequences = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let len = read_u32(&bytes, &mut off)? as usize;
        let mut seq = Vec::with_capacity(len);
        for _ in 0..len {
            seq.push(read_u32(&bytes, &mut off)?);
        }
        sequences.push(seq);
    }
    let corpus = InteractionCorpus {
        users: header.users,
        sequences,
        vocab_size: header.vocab_size,
        item_keys: header.item_keys,
    };
    corpus.check_invariants();
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_corpus(rows: &[(&str, &str, f64)]) -> InteractionCorpus {
        let text: String = rows
            .iter()
            .map(|(u, i, t)| format!("{u},{i},{t}\n"))
            .collect();
        load_interactions_str(&text, InputFormat::Csv).unwrap()
    }

    #[test]
    fn rows_are_sorted_by_timestamp() {
        let c = mini_corpus(&[("u1", "b", 20.0), ("u1", "a", 10.0), ("u1", "c", 30.0)]);
        assert_eq!(c.num_users(), 1);
        let names: Vec<&str> = c.sequences[0].iter().map(|&i| c.external_item(i)).collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn duplicate_rows_are_kept() {
        let c = mini_corpus(&[("u1", "a", 1.0), ("u1", "a", 1.0), ("u1", "a", 2.0)]);
        assert_eq!(c.sequences[0].len(), 3);
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let err = load_interactions_str("u1,a,1\nu2,b\n", InputFormat::Csv).unwrap_err();
        match err {
            CadirecError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            load_interactions_str("", InputFormat::Csv),
            Err(CadirecError::EmptyCorpus(_))
        ));
    }

    #[test]
    fn four_column_rows_ignore_rating() {
        let c = load_interactions_str("u1,a,5.0,100\nu1,b,1.0,50\n", InputFormat::Csv).unwrap();
        let names: Vec<&str> = c.sequences[0].iter().map(|&i| c.external_item(i)).collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    /// Independent brute-force pruner: recompute counts and drop offenders
    /// one class at a time until stable. Works on external keys only.
    fn brute_force_five_core(corpus: &InteractionCorpus) -> (Vec<String>, Vec<Vec<String>>) {
        let mut seqs: Vec<(String, Vec<String>)> = corpus
            .users
            .iter()
            .cloned()
            .zip(corpus.sequences.iter().map(|s| {
                s.iter()
                    .map(|&i| corpus.external_item(i).to_string())
                    .collect::<Vec<_>>()
            }))
            .collect();
        loop {
            let mut item_counts: HashMap<String, usize> = HashMap::new();
            for (_, s) in &seqs {
                for it in s {
                    *item_counts.entry(it.clone()).or_insert(0) += 1;
                }
            }
            let bad_items: std::collections::HashSet<String> = item_counts
                .iter()
                .filter(|(_, &c)| c < 5)
                .map(|(k, _)| k.clone())
                .collect();
            let mut changed = !bad_items.is_empty();
            for (_, s) in seqs.iter_mut() {
                s.retain(|it| !bad_items.contains(it));
            }
            let before = seqs.len();
            seqs.retain(|(_, s)| s.len() >= 5);
            changed |= seqs.len() != before;
            if !changed {
                break;
            }
        }
        (
            seqs.iter().map(|(u, _)| u.clone()).collect(),
            seqs.into_iter().map(|(_, s)| s).collect(),
        )
    }

    fn zipf_corpus(seed: u64, users: usize, items: usize) -> InteractionCorpus {
        let mut s = SeedStream::new(seed);
        let mut rows = Vec::new();
        for u in 0..users {
            let len = 2 + s.below(12);
            for t in 0..len {
                // skewed popularity so the filter has real work to do
                let r: f64 = crate::scalar::Scalar::uniform01(s.rng());
                let item = ((r * r * items as f64) as usize).min(items - 1);
                rows.push(format!("u{u},i{item},{t}"));
            }
        }
        load_interactions_str(&rows.join("\n"), InputFormat::Csv).unwrap()
    }

    #[test]
    fn five_core_matches_brute_force_oracle() {
        let corpus = zipf_corpus(42, 100, 40);
        let filtered = five_core_filter(&corpus).unwrap();
        let (oracle_users, oracle_seqs) = brute_force_five_core(&corpus);
        assert_eq!(filtered.users, oracle_users);
        let got: Vec<Vec<String>> = filtered
            .sequences
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&i| filtered.external_item(i).to_string())
                    .collect()
            })
            .collect();
        assert_eq!(got, oracle_seqs);
        // invariant: all users and items have >= 5 interactions
        let mut counts = vec![0usize; filtered.vocab_size + 1];
        for s in &filtered.sequences {
            assert!(s.len() >= 5);
            for &i in s {
                counts[i as usize] += 1;
            }
        }
        assert!(counts[1..].iter().all(|&c| c >= 5));
    }

    #[test]
    fn five_core_is_idempotent() {
        for seed in [1, 2, 3, 7] {
            let corpus = zipf_corpus(seed, 60, 25);
            match five_core_filter(&corpus) {
                Ok(once) => {
                    let twice = five_core_filter(&once).unwrap();
                    assert_eq!(once.users, twice.users);
                    assert_eq!(once.sequences, twice.sequences);
                }
                Err(CadirecError::EmptyAfterFilter) => {}
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
    }

    #[test]
    fn five_core_keeps_satisfied_corpus_unchanged() {
        let mut rows = Vec::new();
        for u in 0..6 {
            for (t, it) in (0..6).enumerate() {
                rows.push(format!("u{u},i{it},{t}"));
            }
        }
        let corpus = load_interactions_str(&rows.join("\n"), InputFormat::Csv).unwrap();
        let filtered = five_core_filter(&corpus).unwrap();
        assert_eq!(filtered.users, corpus.users);
        assert_eq!(filtered.sequences, corpus.sequences);
    }

    #[test]
    fn five_core_drops_four_interaction_user() {
        let mut rows = Vec::new();
        for u in 0..6 {
            for (t, it) in (0..5).enumerate() {
                rows.push(format!("u{u},i{it},{t}"));
            }
        }
        for (t, it) in (0..4).enumerate() {
            rows.push(format!("u_small,i{it},{t}"));
        }
        let corpus = load_interactions_str(&rows.join("\n"), InputFormat::Csv).unwrap();
        let filtered = five_core_filter(&corpus).unwrap();
        assert!(!filtered.users.iter().any(|u| u == "u_small"));
        assert_eq!(filtered.num_users(), 6);
    }

    #[test]
    fn splits_hold_out_last_two() {
        let c = mini_corpus(&[
            ("u", "1", 1.0),
            ("u", "2", 2.0),
            ("u", "3", 3.0),
            ("u", "4", 4.0),
            ("u", "5", 5.0),
        ]);
        let split = build_splits(&c, 50).unwrap();
        assert_eq!(split.train_inputs[0], vec![1, 2, 3]);
        assert_eq!(split.valid_target[0], 4);
        assert_eq!(split.test_target[0], 5);
    }

    #[test]
    fn splits_minimal_length_three() {
        let c = mini_corpus(&[("u", "7", 1.0), ("u", "8", 2.0), ("u", "9", 3.0)]);
        let split = build_splits(&c, 10).unwrap();
        assert_eq!(split.train_inputs[0].len(), 1);
        assert_eq!(split.valid_target[0], 2);
        assert_eq!(split.test_target[0], 3);
    }

    #[test]
    fn splits_truncate_to_most_recent() {
        let rows: Vec<String> = (0..300).map(|t| format!("u,it{t},{t}")).collect();
        let c = load_interactions_str(&rows.join("\n"), InputFormat::Csv).unwrap();
        let split = build_splits(&c, 200).unwrap();
        assert_eq!(split.train_inputs[0].len(), 200);
        // prefix is items 0..298; keep the most recent 200 => items 98..297
        assert_eq!(c.external_item(split.train_inputs[0][0]), "it98");
        assert_eq!(
            c.external_item(*split.train_inputs[0].last().unwrap()),
            "it297"
        );
    }

    #[test]
    fn short_users_are_skipped_with_count() {
        let c = mini_corpus(&[
            ("a", "1", 1.0),
            ("a", "2", 2.0),
            ("a", "3", 3.0),
            ("b", "1", 1.0),
            ("b", "2", 2.0),
        ]);
        let split = build_splits(&c, 10).unwrap();
        assert_eq!(split.skipped_users, 1);
        assert_eq!(split.num_users(), 1);
    }

    fn toy_split(users: usize) -> SplitDataset {
        let mut rows = Vec::new();
        for u in 0..users {
            for t in 0..(3 + u % 4) {
                rows.push(format!("u{u},i{},{t}", (u + t) % 7));
            }
        }
        let c = load_interactions_str(&rows.join("\n"), InputFormat::Csv).unwrap();
        build_splits(&c, 4).unwrap()
    }

    #[test]
    fn batch_sizes_follow_arithmetic() {
        let split = toy_split(10);
        let seed = SeedStream::new(5);
        let sizes: Vec<usize> = split.batches(4, &seed).map(|b| b.batch).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order() {
        let split = toy_split(10);
        let a: Vec<Vec<usize>> = split
            .batches(3, &SeedStream::new(9))
            .map(|b| b.rows)
            .collect();
        let b: Vec<Vec<usize>> = split
            .batches(3, &SeedStream::new(9))
            .map(|b| b.rows)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_covers_every_user_once() {
        let split = toy_split(23);
        let mut seen: Vec<usize> = split
            .batches(5, &SeedStream::new(1))
            .flat_map(|b| b.rows)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn padding_layout_and_roundtrip() {
        let b = SequenceBatch::from_rows(&[vec![5, 6]], vec![0], 4);
        assert_eq!(b.items, vec![0, 0, 5, 6]);
        assert_eq!(b.pad_mask, vec![true, true, false, false]);
        assert_eq!(b.lengths, vec![2]);
        assert_eq!(b.unpadded_row(0), vec![5, 6]);
    }

    #[test]
    fn markov_corpus_respects_transition_support() {
        let (corpus, chain) = generate_markov_corpus(50, 10, 77, (5, 12), 0.3);
        for seq in &corpus.sequences {
            for w in seq.windows(2) {
                assert!(chain.prob(w[0], w[1]) > 0.0);
            }
        }
    }

    #[test]
    fn cycle_corpus_is_rotations() {
        let chain = MarkovChain::cycle(8);
        let corpus = sample_markov_corpus(20, &chain, (5, 9), &mut SeedStream::new(3));
        for seq in &corpus.sequences {
            for w in seq.windows(2) {
                assert_eq!(w[1], (w[0] % 8) + 1);
            }
        }
    }

    #[test]
    fn block_chain_rows_are_valid_and_block_heavy() {
        let chain =
            MarkovChain::block_random(24, 4, 0.3, 0.05, &mut SeedStream::new(9));
        for i in 0..24usize {
            let row = &chain.transition[i * 24..(i + 1) * 24];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&w| w > 0.0), "strictly positive rows");
            let b = i / 6;
            let within: f64 = row[b * 6..(b + 1) * 6].iter().sum();
            assert!(within > 0.8, "row {i}: within-block mass {within}");
        }
    }

    #[test]
    fn markov_frequencies_match_matrix() {
        // law of large numbers: empirical transition frequencies over 1e5
        // steps land within ±0.02 of the stored matrix, per cell
        let mut stream = SeedStream::new(123);
        let chain = MarkovChain::random(6, 0.8, &mut stream.child(0));
        let steps = 100_000;
        let mut counts = vec![0usize; 6 * 6];
        let mut from_counts = vec![0usize; 6];
        let mut cur: u32 = 1;
        let mut s = stream.child(1);
        for _ in 0..steps {
            let next = chain.sample_next(cur, &mut s);
            counts[(cur as usize - 1) * 6 + (next as usize - 1)] += 1;
            from_counts[cur as usize - 1] += 1;
            cur = next;
        }
        for from in 0..6 {
            if from_counts[from] < 1000 {
                continue;
            }
            for to in 0..6 {
                let emp = counts[from * 6 + to] as f64 / from_counts[from] as f64;
                let truth = chain.transition[from * 6 + to];
                assert!(
                    (emp - truth).abs() <= 0.02,
                    "cell ({from},{to}): emp {emp} vs true {truth}"
                );
            }
        }
    }

    #[test]
    fn corpus_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, _) = generate_markov_corpus(12, 6, 5, (4, 9), 0.5);
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.users, loaded.users);
        assert_eq!(corpus.sequences, loaded.sequences);
        assert_eq!(corpus.vocab_size, loaded.vocab_size);
        assert_eq!(corpus.item_keys, loaded.item_keys);
    }
}
