//! Causal Transformer sequence encoder, full-catalog scorer, and the
//! pairwise BCE recommendation loss.
//!
//! Blocks are pre-norm residual: `x + Attn(LN(x))`, `x + FFN(LN(x))` with a
//! GELU feed-forward of width 4d, followed by a final layer norm. The same
//! block structure runs bidirectionally inside the diffusion denoiser.

use serde::{Deserialize, Serialize};

use crate::corpus::SequenceBatch;
use crate::embed::{add_positions_node, lookup_node, EmbeddingTables, TableNodes};
use crate::graph::{AttnSpec, Graph, NodeId};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One pre-norm Transformer block's weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerBlock<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn init(d: usize, std: T, stream: &mut SeedStream) -> Self {
        let ff = 4 * d;
        TransformerBlock {
            ln1_g: Tensor::filled(1, d, T::one()),
            ln1_b: Tensor::zeros(1, d),
            wq: Tensor::randn(d, d, std, &mut stream.child(0)),
            bq: Tensor::zeros(1, d),
            wk: Tensor::randn(d, d, std, &mut stream.child(1)),
            bk: Tensor::zeros(1, d),
            wv: Tensor::randn(d, d, std, &mut stream.child(2)),
            bv: Tensor::zeros(1, d),
            wo: Tensor::randn(d, d, std, &mut stream.child(3)),
            bo: Tensor::zeros(1, d),
            ln2_g: Tensor::filled(1, d, T::one()),
            ln2_b: Tensor::zeros(1, d),
            w1: Tensor::randn(d, ff, std, &mut stream.child(4)),
            b1: Tensor::zeros(1, ff),
            w2: Tensor::randn(ff, d, std, &mut stream.child(5)),
            b2: Tensor::zeros(1, d),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (name, t) in [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (name, t) in [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl BlockNodes {
    pub fn register<T: Scalar>(g: &mut Graph<T>, b: &TransformerBlock<T>) -> Self {
        BlockNodes {
            ln1_g: g.leaf(b.ln1_g.clone()),
            ln1_b: g.leaf(b.ln1_b.clone()),
            wq: g.leaf(b.wq.clone()),
            bq: g.leaf(b.bq.clone()),
            wk: g.leaf(b.wk.clone()),
            bk: g.leaf(b.bk.clone()),
            wv: g.leaf(b.wv.clone()),
            bv: g.leaf(b.bv.clone()),
            wo: g.leaf(b.wo.clone()),
            bo: g.leaf(b.bo.clone()),
            ln2_g: g.leaf(b.ln2_g.clone()),
            ln2_b: g.leaf(b.ln2_b.clone()),
            w1: g.leaf(b.w1.clone()),
            b1: g.leaf(b.b1.clone()),
            w2: g.leaf(b.w2.clone()),
            b2: g.leaf(b.b2.clone()),
        }
    }
}

/// Whether the attention sublayer mixes positions or is replaced by a
/// position-wise feed-forward of equal width (the denoiser's "no context"
/// ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Attention,
    FeedForward,
}

/// Settings for one stack of blocks on the tape.
pub struct StackSpec<'a> {
    pub blocks: &'a [BlockNodes],
    pub final_ln: (NodeId, NodeId),
    pub heads: usize,
    pub causal: bool,
    pub mixer: MixerKind,
    pub dropout: f64,
}

/// Dropout mask with inverted scaling, or `None` in eval mode / p = 0.
fn dropout_mask<T: Scalar>(
    rows: usize,
    cols: usize,
    p: f64,
    mode: Mode,
    stream: &mut SeedStream,
) -> Option<Tensor<T>> {
    if mode == Mode::Eval || p <= 0.0 {
        return None;
    }
    let keep = T::from_f64_c(1.0 / (1.0 - p));
    let mut m = Tensor::zeros(rows, cols);
    for v in m.data_mut() {
        let u: f64 = Scalar::uniform01(stream.rng());
        if u >= p {
            *v = keep;
        }
    }
    Some(m)
}

fn maybe_dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: f64,
    mode: Mode,
    stream: &mut SeedStream,
    tag: u64,
) -> NodeId {
    let v = g.value(x);
    match dropout_mask(v.rows(), v.cols(), p, mode, &mut stream.child(tag)) {
        Some(m) => g.mul_mask(x, m),
        None => x,
    }
}

/// Run a block stack over already-embedded inputs.
///
/// `x` is `[batch·seq × d]`; `key_mask` hides padding positions as keys.
pub fn stack_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    spec: &StackSpec<'_>,
    batch: usize,
    seq: usize,
    key_mask: &[bool],
    mode: Mode,
    stream: &mut SeedStream,
) -> NodeId {
    let mut h = x;
    for (li, b) in spec.blocks.iter().enumerate() {
        let tag = 100 + li as u64 * 10;
        // mixer sublayer
        let normed = g.layer_norm(h, b.ln1_g, b.ln1_b);
        let mixed = match spec.mixer {
            MixerKind::Attention => {
                let q0 = g.matmul(normed, b.wq);
                let q = g.add_bias(q0, b.bq);
                let k0 = g.matmul(normed, b.wk);
                let k = g.add_bias(k0, b.bk);
                let v0 = g.matmul(normed, b.wv);
                let v = g.add_bias(v0, b.bv);
                let att = g.attention(
                    q,
                    k,
                    v,
                    AttnSpec {
                        batch,
                        seq,
                        heads: spec.heads,
                        causal: spec.causal,
                        key_mask: key_mask.to_vec(),
                    },
                );
                let o0 = g.matmul(att, b.wo);
                g.add_bias(o0, b.bo)
            }
            // equal-width position-wise replacement: Wo·gelu(Wq·u + bq) + bo
            MixerKind::FeedForward => {
                let a0 = g.matmul(normed, b.wq);
                let a1 = g.add_bias(a0, b.bq);
                let a2 = g.gelu(a1);
                let o0 = g.matmul(a2, b.wo);
                g.add_bias(o0, b.bo)
            }
        };
        let mixed = maybe_dropout(g, mixed, spec.dropout, mode, stream, tag);
        h = g.add(h, mixed);

        // feed-forward sublayer
        let normed2 = g.layer_norm(h, b.ln2_g, b.ln2_b);
        let f0 = g.matmul(normed2, b.w1);
        let f1 = g.add_bias(f0, b.b1);
        let f2 = g.gelu(f1);
        let f3 = g.matmul(f2, b.w2);
        let f4 = g.add_bias(f3, b.b2);
        let f5 = maybe_dropout(g, f4, spec.dropout, mode, stream, tag + 1);
        h = g.add(h, f5);
    }
    g.layer_norm(h, spec.final_ln.0, spec.final_ln.1)
}

/// Encoder weights: block stack plus final layer norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderWeights<T> {
    pub blocks: Vec<TransformerBlock<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
    pub heads: usize,
    pub dropout: f64,
}

impl<T: Scalar> EncoderWeights<T> {
    pub fn init(d: usize, layers: usize, heads: usize, dropout: f64, std: T, stream: &mut SeedStream) -> Self {
        assert_eq!(d % heads, 0, "d must be divisible by heads");
        EncoderWeights {
            blocks: (0..layers)
                .map(|l| TransformerBlock::init(d, std, &mut stream.child(l as u64)))
                .collect(),
            ln_f_g: Tensor::filled(1, d, T::one()),
            ln_f_b: Tensor::zeros(1, d),
            heads,
            dropout,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("enc.l{i}"), f);
        }
        f("enc.ln_f_g".into(), &self.ln_f_g);
        f("enc.ln_f_b".into(), &self.ln_f_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("enc.l{i}"), f);
        }
        f("enc.ln_f_g".into(), &mut self.ln_f_g);
        f("enc.ln_f_b".into(), &mut self.ln_f_b);
    }
}

pub struct EncoderNodes {
    pub blocks: Vec<BlockNodes>,
    pub ln_f: (NodeId, NodeId),
}

impl EncoderNodes {
    pub fn register<T: Scalar>(g: &mut Graph<T>, w: &EncoderWeights<T>) -> Self {
        EncoderNodes {
            blocks: w.blocks.iter().map(|b| BlockNodes::register(g, b)).collect(),
            ln_f: (g.leaf(w.ln_f_g.clone()), g.leaf(w.ln_f_b.clone())),
        }
    }
}

/// Encode a padded batch: causal attention over non-pad keys. Returns the
/// full hidden-state node `[batch·seq × d]`.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    tables: &TableNodes,
    enc: &EncoderNodes,
    heads: usize,
    dropout: f64,
    batch: &SequenceBatch,
    mode: Mode,
    stream: &mut SeedStream,
) -> NodeId {
    let e = lookup_node(g, tables.item, &batch.items);
    let x = add_positions_node(g, e, tables.pos, batch.seq);
    let x = maybe_dropout(g, x, dropout, mode, stream, 1);
    let spec = StackSpec {
        blocks: &enc.blocks,
        final_ln: enc.ln_f,
        heads,
        causal: true,
        mixer: MixerKind::Attention,
        dropout,
    };
    stack_forward(
        g,
        x,
        &spec,
        batch.batch,
        batch.seq,
        &batch.pad_mask,
        mode,
        stream,
    )
}

/// Gather the last-position state of each row (rows are left-padded, so
/// the last column always holds the most recent item).
pub fn last_states<T: Scalar>(g: &mut Graph<T>, h_all: NodeId, batch: usize, seq: usize) -> NodeId {
    let ids: Vec<usize> = (0..batch).map(|r| r * seq + seq - 1).collect();
    g.gather_rows(h_all, ids)
}

/// Full-catalog scores `r = h_last · Mᵀ` over item rows 1..|V|; column j
/// corresponds to item id j+1. Plain math: scoring is never differentiated.
pub fn score_all<T: Scalar>(h_last: &Tensor<T>, tables: &EmbeddingTables<T>) -> Tensor<T> {
    let v = tables.vocab_size();
    let d = tables.dim();
    let mut out = Tensor::zeros(h_last.rows(), v);
    for r in 0..h_last.rows() {
        let hrow = h_last.row(r);
        let orow = out.row_mut(r);
        for (j, o) in orow.iter_mut().enumerate() {
            let erow = tables.item_table.row(j + 1);
            let mut s = T::zero();
            for c in 0..d {
                s += hrow[c] * erow[c];
            }
            *o = s;
        }
    }
    out
}

/// Supervision pairs for the recommendation loss: every non-pad step whose
/// next item is still inside the row (the held-out targets never appear).
#[derive(Debug, Clone)]
pub struct RecSupervision {
    /// Flat `[batch·seq]` index of the supervised step.
    pub step_rows: Vec<usize>,
    pub targets: Vec<u32>,
    pub negatives: Vec<u32>,
}

/// One uniform negative per positive, drawn from `[1, |V|]` excluding the
/// step's ground-truth item.
pub fn draw_supervision(
    batch: &SequenceBatch,
    vocab: usize,
    stream: &mut SeedStream,
) -> RecSupervision {
    let mut sup = RecSupervision {
        step_rows: Vec::new(),
        targets: Vec::new(),
        negatives: Vec::new(),
    };
    for r in 0..batch.batch {
        let start = batch.seq - batch.lengths[r];
        for w in start..batch.seq - 1 {
            let target = batch.items[r * batch.seq + w + 1];
            sup.step_rows.push(r * batch.seq + w);
            sup.targets.push(target);
            let neg = loop {
                let cand = (stream.below(vocab) + 1) as u32;
                if cand != target {
                    break cand;
                }
            };
            sup.negatives.push(neg);
        }
    }
    sup
}

/// Mean over supervised steps of `-log σ(h·e⁺) - log(1-σ(h·e⁻))`.
/// Returns a zero constant when the batch has no supervised step.
pub fn rec_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    h_all: NodeId,
    item_table: NodeId,
    sup: &RecSupervision,
) -> NodeId {
    if sup.step_rows.is_empty() {
        return g.leaf(Tensor::scalar(T::zero()));
    }
    let h_steps = g.gather_rows(h_all, sup.step_rows.clone());
    let e_pos = lookup_node(g, item_table, &sup.targets);
    let e_neg = lookup_node(g, item_table, &sup.negatives);
    let pos_logits = g.rows_dot(h_steps, e_pos);
    let neg_logits = g.rows_dot(h_steps, e_neg);
    g.pair_bce(pos_logits, neg_logits)
}

/// Eval-mode last-position representations for arbitrary unpadded rows,
/// chunked through short-lived tapes.
pub fn encode_rows_eval<T: Scalar>(
    tables: &EmbeddingTables<T>,
    enc: &EncoderWeights<T>,
    rows: &[Vec<u32>],
    max_len: usize,
    chunk: usize,
) -> Tensor<T> {
    let d = tables.dim();
    let mut out = Tensor::zeros(rows.len(), d);
    let mut silent = SeedStream::new(0);
    let mut done = 0;
    while done < rows.len() {
        let end = (done + chunk).min(rows.len());
        let slice: Vec<Vec<u32>> = rows[done..end]
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if r.len() > max_len {
                    let cut = r.len() - max_len;
                    r.drain(..cut);
                }
                r
            })
            .collect();
        let ids: Vec<usize> = (done..end).collect();
        let b = SequenceBatch::from_rows(&slice, ids, max_len);
        let mut g: Graph<T> = Graph::new();
        let tn = TableNodes::register(&mut g, tables);
        let en = EncoderNodes::register(&mut g, enc);
        let h = encode_graph(
            &mut g,
            &tn,
            &en,
            enc.heads,
            enc.dropout,
            &b,
            Mode::Eval,
            &mut silent,
        );
        let last = last_states(&mut g, h, b.batch, b.seq);
        let vals = g.value(last);
        for (i, r) in (done..end).enumerate() {
            out.row_mut(r).copy_from_slice(vals.row(i));
        }
        done = end;
    }
    out
}
