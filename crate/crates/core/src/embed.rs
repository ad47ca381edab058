//! Shared item and position embedding tables.
//!
//! One table object feeds the sequence encoder, the diffusion embedding
//! transition, and the tied rounding logits. Row 0 of the item table is the
//! padding row: identically zero, never updated.

use serde::{Deserialize, Serialize};

use crate::error::{CadirecError, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTables<T> {
    /// `[|V|+1 × d]`; row 0 is the zero pad row.
    pub item_table: Tensor<T>,
    /// `[n × d]` learned position embeddings.
    pub pos_table: Tensor<T>,
}

impl<T: Scalar> EmbeddingTables<T> {
    /// Zero-mean Gaussian init (std 0.02 by default) with the pad row zeroed.
    pub fn init(vocab: usize, max_len: usize, dim: usize, std: T, stream: &mut SeedStream) -> Self {
        let mut item_table = Tensor::randn(vocab + 1, dim, std, &mut stream.child(0));
        for v in item_table.row_mut(0) {
            *v = T::zero();
        }
        let pos_table = Tensor::randn(max_len, dim, std, &mut stream.child(1));
        EmbeddingTables {
            item_table,
            pos_table,
        }
    }

    pub fn dim(&self) -> usize {
        self.item_table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.item_table.rows() - 1
    }

    pub fn max_len(&self) -> usize {
        self.pos_table.rows()
    }

    /// Row-wise gather; id 0 yields the zero pad vector.
    pub fn lookup(&self, items: &[u32]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Tensor::zeros(items.len(), d);
        for (r, &id) in items.iter().enumerate() {
            if id as usize >= self.item_table.rows() {
                return Err(CadirecError::IdOutOfRange {
                    id: id as usize,
                    max: self.vocab_size(),
                });
            }
            out.row_mut(r)
                .copy_from_slice(self.item_table.row(id as usize));
        }
        Ok(out)
    }

    /// `e + p_w` broadcast over the batch; `e` is `[batch·seq × d]` flat.
    pub fn add_positions(&self, e: &Tensor<T>, seq: usize) -> Tensor<T> {
        assert!(seq <= self.max_len(), "sequence longer than position table");
        assert_eq!(e.rows() % seq, 0);
        let mut out = e.clone();
        for r in 0..out.rows() {
            let w = r % seq;
            let prow = self.pos_table.row(w);
            for (o, &p) in out.row_mut(r).iter_mut().zip(prow) {
                *o += p;
            }
        }
        out
    }
}

/// Node handles for the two tables once registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TableNodes {
    pub item: NodeId,
    pub pos: NodeId,
}

impl TableNodes {
    pub fn register<T: Scalar>(g: &mut Graph<T>, tables: &EmbeddingTables<T>) -> Self {
        TableNodes {
            item: g.leaf(tables.item_table.clone()),
            pos: g.leaf(tables.pos_table.clone()),
        }
    }
}

/// Graph-side lookup: gather item rows for a flat id list.
pub fn lookup_node<T: Scalar>(g: &mut Graph<T>, table: NodeId, items: &[u32]) -> NodeId {
    let ids: Vec<usize> = items.iter().map(|&i| i as usize).collect();
    g.gather_rows(table, ids)
}

/// Graph-side position add: `x[r] += pos_table[r mod seq]`.
pub fn add_positions_node<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    pos: NodeId,
    seq: usize,
) -> NodeId {
    let rows = g.value(x).rows();
    let ids: Vec<usize> = (0..rows).map(|r| r % seq).collect();
    let p = g.gather_rows(pos, ids);
    g.add(x, p)
}
