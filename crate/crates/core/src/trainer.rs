//! Joint end-to-end training: `L = L_rec + α·L_cl + β·L_d` over one shared
//! parameter set, Adam with global-norm clipping, validation-based early
//! stopping, and resumable checkpoints.
//!
//! Every random draw derives from `(seed, epoch, batch, role)` tags, so a
//! resumed run replays exactly the same stream as an uninterrupted one.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{random_pair, AugmentedPair, ViewGenOpts, ViewSampler};
use crate::config::{Config, ViewSource};
use crate::contrastive::cl_loss_graph;
use crate::corpus::{SequenceBatch, SplitDataset};
use crate::diffusion::{
    build_schedule, diffusion_loss_graph, draw_diffusion, DenoiserNodes, DenoiserWeights,
    NoiseSchedule,
};
use crate::embed::{EmbeddingTables, TableNodes};
use crate::error::{CadirecError, Result};
use crate::eval::{evaluate_split, EvalStage};
use crate::graph::{Graph, NodeId};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::sr_encoder::{
    draw_supervision, encode_graph, last_states, rec_loss_graph, EncoderNodes, EncoderWeights,
    Mode,
};
use crate::tensor::Tensor;

/// All trainable state: the shared tables, the sequence encoder, and the
/// diffusion denoiser.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub tables: EmbeddingTables<T>,
    pub encoder: EncoderWeights<T>,
    pub denoiser: DenoiserWeights<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &Config, vocab: usize, stream: &mut SeedStream) -> Self {
        let std = T::from_f64_c(cfg.model.init_std);
        ModelParams {
            tables: EmbeddingTables::init(
                vocab,
                cfg.data.max_len,
                cfg.model.d,
                std,
                &mut stream.child(0),
            ),
            encoder: EncoderWeights::init(
                cfg.model.d,
                cfg.model.layers,
                cfg.model.heads,
                cfg.model.dropout,
                std,
                &mut stream.child(1),
            ),
            denoiser: DenoiserWeights::init(
                cfg.model.d,
                cfg.model.denoiser_layers,
                cfg.model.denoiser_heads,
                cfg.model.dropout,
                cfg.diffusion.t_max,
                cfg.model.denoiser_kind,
                std,
                &mut stream.child(2),
            ),
        }
    }

    /// Fixed-order walk over every trainable block. The order defines the
    /// optimizer-state and gradient layout.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f("item_table".into(), &self.tables.item_table);
        f("pos_table".into(), &self.tables.pos_table);
        self.encoder.visit(f);
        self.denoiser.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("item_table".into(), &mut self.tables.item_table);
        f("pos_table".into(), &mut self.tables.pos_table);
        self.encoder.visit_mut(f);
        self.denoiser.visit_mut(f);
    }

    pub fn named_blocks(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.named_blocks()
            .iter()
            .map(|(_, t)| (t.rows(), t.cols()))
            .collect()
    }

    pub fn max_block_norm(&self) -> f64 {
        self.named_blocks()
            .iter()
            .map(|(_, t)| t.frobenius_norm().to_f64_c())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.named_blocks().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        // serialize-free cast via the visitor would need matching struct
        // shapes; go through JSON which is simpler and test-only
        let json = serde_json::to_string(self).expect("params serialize");
        serde_json::from_str(&json).expect("params deserialize")
    }
}

/// Tape handles for every registered parameter, in `visit` order.
pub struct ModelNodes {
    pub tables: TableNodes,
    pub encoder: EncoderNodes,
    pub denoiser: DenoiserNodes,
    pub order: Vec<NodeId>,
}

pub fn register_params<T: Scalar>(g: &mut Graph<T>, p: &ModelParams<T>) -> ModelNodes {
    let start = g.len();
    let tables = TableNodes::register(g, &p.tables);
    let encoder = EncoderNodes::register(g, &p.encoder);
    let denoiser = DenoiserNodes::register(g, &p.denoiser);
    // registration order matches visit order: tables, encoder blocks +
    // final norm, denoiser blocks + head + step table
    let order: Vec<NodeId> = (start..g.len()).map(NodeId).collect();
    debug_assert_eq!(order.len(), p.named_blocks().len());
    ModelNodes {
        tables,
        encoder,
        denoiser,
        order,
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr: T::from_f64_c(lr),
            beta1: T::from_f64_c(0.9),
            beta2: T::from_f64_c(0.999),
            eps: T::from_f64_c(1e-8),
            step: 0,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    /// One update over all blocks; `grads` follows the `visit` order.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let mut idx = 0;
        params.visit_mut(&mut |_name, block| {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((p, &gv), (mv, vv)) in block
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Single training step
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_cl: f64,
    pub l_d: f64,
    pub total: f64,
}

/// Generate the per-row view pairs for one batch with the configured source.
pub fn make_view_pairs<T: Scalar>(
    params: &ModelParams<T>,
    schedule: &NoiseSchedule<T>,
    cfg: &Config,
    batch: &SequenceBatch,
    stream: &SeedStream,
) -> Result<Vec<AugmentedPair>> {
    match cfg.augment.view_source {
        ViewSource::Diffusion => {
            let sampler = ViewSampler {
                tables: &params.tables,
                denoiser: &params.denoiser,
                schedule,
                opts: ViewGenOpts {
                    steps: cfg.augment.respace_steps,
                    snap_posterior: cfg.augment.snap_posterior,
                },
            };
            sampler.make_pairs_batch(batch, cfg.train.rho, stream)
        }
        ViewSource::Random => Ok((0..batch.batch)
            .map(|r| {
                random_pair(
                    &batch.unpadded_row(r),
                    cfg.train.rho,
                    params.tables.vocab_size(),
                    &stream.child(r as u64),
                )
            })
            .collect()),
    }
}

/// One optimizer step on one batch. `pairs` overrides on-the-fly view
/// generation (the per-epoch cache path).
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut Adam<T>,
    batch: &SequenceBatch,
    cfg: &Config,
    schedule: &NoiseSchedule<T>,
    step_index: usize,
    stream: &SeedStream,
    pairs: Option<&[AugmentedPair]>,
) -> Result<LossBreakdown> {
    let vocab = params.tables.vocab_size();
    let use_cl = cfg.train.alpha > 0.0 && cfg.train.rho > 0.0;
    let use_diff = cfg.train.beta > 0.0 && cfg.train.rho > 0.0;

    // views are sampled with the current parameters, outside the tape
    let own_pairs: Option<Vec<AugmentedPair>> = if use_cl && pairs.is_none() {
        Some(make_view_pairs(params, schedule, cfg, batch, &stream.child(3))?)
    } else {
        None
    };
    let pairs = pairs.or(own_pairs.as_deref());

    let mut g: Graph<T> = Graph::new();
    let nodes = register_params(&mut g, params);

    // recommendation loss on the original batch
    let mut enc_stream = stream.child(4);
    let h_all = encode_graph(
        &mut g,
        &nodes.tables,
        &nodes.encoder,
        params.encoder.heads,
        params.encoder.dropout,
        batch,
        Mode::Train,
        &mut enc_stream,
    );
    let sup = draw_supervision(batch, vocab, &mut stream.child(1));
    let l_rec = rec_loss_graph(&mut g, h_all, nodes.tables.item, &sup);

    // contrastive loss on the two generated views
    let l_cl = if use_cl {
        let pairs = pairs.expect("views exist when contrastive is active");
        let rows1: Vec<Vec<u32>> = pairs.iter().map(|p| p.view1.clone()).collect();
        let rows2: Vec<Vec<u32>> = pairs.iter().map(|p| p.view2.clone()).collect();
        let b1 = batch.with_rows(&rows1);
        let b2 = batch.with_rows(&rows2);
        let mut s1 = stream.child(5);
        let h1 = encode_graph(
            &mut g,
            &nodes.tables,
            &nodes.encoder,
            params.encoder.heads,
            params.encoder.dropout,
            &b1,
            Mode::Train,
            &mut s1,
        );
        let mut s2 = stream.child(6);
        let h2 = encode_graph(
            &mut g,
            &nodes.tables,
            &nodes.encoder,
            params.encoder.heads,
            params.encoder.dropout,
            &b2,
            Mode::Train,
            &mut s2,
        );
        let h1_last = last_states(&mut g, h1, b1.batch, b1.seq);
        let h2_last = last_states(&mut g, h2, b2.batch, b2.seq);
        Some(cl_loss_graph(
            &mut g,
            h1_last,
            h2_last,
            T::from_f64_c(cfg.contrastive.temperature),
        ))
    } else {
        None
    };

    // diffusion loss on the original batch
    let l_d = if use_diff {
        let draws = draw_diffusion::<T>(
            batch,
            cfg.train.rho,
            schedule.t_max,
            params.tables.dim(),
            &mut stream.child(2),
        );
        let mut dstream = stream.child(7);
        Some(
            diffusion_loss_graph(
                &mut g,
                &nodes.tables,
                &nodes.denoiser,
                batch,
                &draws,
                schedule,
                cfg.diffusion.rounding_full_sequence,
                Mode::Train,
                &mut dstream,
            )
            .total,
        )
    } else {
        None
    };

    let mut total = l_rec;
    if let Some(lc) = l_cl {
        total = g.add_scaled(total, lc, T::from_f64_c(cfg.train.alpha));
    }
    if let Some(ld) = l_d {
        total = g.add_scaled(total, ld, T::from_f64_c(cfg.train.beta));
    }

    let breakdown = LossBreakdown {
        l_rec: g.value(l_rec).item().to_f64_c(),
        l_cl: l_cl.map(|n| g.value(n).item().to_f64_c()).unwrap_or(0.0),
        l_d: l_d.map(|n| g.value(n).item().to_f64_c()).unwrap_or(0.0),
        total: g.value(total).item().to_f64_c(),
    };
    for (value, term) in [
        (breakdown.l_rec, "rec"),
        (breakdown.l_cl, "cl"),
        (breakdown.l_d, "d"),
        (breakdown.total, "total"),
    ] {
        if !value.is_finite() {
            return Err(CadirecError::NonFiniteLoss {
                step: step_index,
                term: term.into(),
                max_norm: params.max_block_norm(),
            });
        }
    }

    let mut grads_by_node = g.backward(total);
    let shapes = params.block_shapes();
    let mut grads: Vec<Tensor<T>> = nodes
        .order
        .iter()
        .zip(shapes.iter())
        .map(|(&id, &(r, c))| grads_by_node.take_or_zeros(id, r, c))
        .collect();

    // the pad row of the item table receives no gradient
    for v in grads[0].row_mut(0) {
        *v = T::zero();
    }

    // global-norm clipping
    if cfg.train.clip_norm > 0.0 {
        let clip = T::from_f64_c(cfg.train.clip_norm);
        let mut sq = T::zero();
        for gt in &grads {
            for &v in gt.data() {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        if norm > clip {
            let scale = clip / norm;
            for gt in grads.iter_mut() {
                gt.scale_assign(scale);
            }
        }
    }

    opt.update(params, &grads);
    debug_assert!(
        params.tables.item_table.row(0).iter().all(|&v| v == T::zero()),
        "pad row must stay zero"
    );
    if !params.tables.item_table.is_finite() || !params.tables.pos_table.is_finite() {
        return Err(CadirecError::NonFiniteLoss {
            step: step_index,
            term: "post-update tables".into(),
            max_norm: params.max_block_norm(),
        });
    }
    Ok(breakdown)
}

// ---------------------------------------------------------------------------
// Fit loop with early stopping and checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_cl: f64,
    pub l_d: f64,
    pub total: f64,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub magic: String,
    pub config: Config,
    pub config_fingerprint: String,
    pub vocab_size: usize,
    pub params: ModelParams<T>,
    pub best_params: ModelParams<T>,
    pub adam: Adam<T>,
    pub next_epoch: usize,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub history: Vec<EpochStats>,
}

pub const CHECKPOINT_MAGIC: &str = "cadirec-ckpt-v1";

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint<T> = serde_json::from_str(&text)?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(CadirecError::Checkpoint(format!(
                "unknown checkpoint magic {:?}",
                ckpt.magic
            )));
        }
        Ok(ckpt)
    }
}

pub struct FitResult<T> {
    pub checkpoint: Checkpoint<T>,
    pub stopped_early: bool,
}

/// Train from scratch.
pub fn fit<T: Scalar>(cfg: &Config, split: &SplitDataset) -> Result<FitResult<T>> {
    cfg.validate()?;
    if split.num_users() == 0 {
        return Err(CadirecError::Config("empty dataset".into()));
    }
    let root = SeedStream::new(cfg.train.seed);
    let mut init_stream = root.child(0);
    let params: ModelParams<T> = ModelParams::init(cfg, split.vocab_size, &mut init_stream);
    let adam = Adam::new(cfg.train.lr, &params.block_shapes());
    let ckpt = Checkpoint {
        magic: CHECKPOINT_MAGIC.into(),
        config: cfg.clone(),
        config_fingerprint: cfg.fingerprint(),
        vocab_size: split.vocab_size,
        best_params: params.clone(),
        params,
        adam,
        next_epoch: 0,
        best_epoch: 0,
        best_valid_ndcg: f64::NEG_INFINITY,
        history: Vec::new(),
    };
    fit_from(ckpt, split)
}

/// Continue training from a checkpoint; a resumed run reproduces the
/// uninterrupted run exactly (same seed-derived streams per epoch).
pub fn fit_from<T: Scalar>(
    mut ckpt: Checkpoint<T>,
    split: &SplitDataset,
) -> Result<FitResult<T>> {
    let cfg = ckpt.config.clone();
    let schedule: NoiseSchedule<T> =
        build_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0)?;
    let root = SeedStream::new(cfg.train.seed);
    let mut stopped_early = false;

    for epoch in ckpt.next_epoch..cfg.train.epochs {
        let epoch_stream = root.child(1).child(epoch as u64);

        // optional per-epoch view cache, generated in deterministic row order
        let cache: Option<Vec<AugmentedPair>> = if cfg.augment.cache_per_epoch
            && cfg.train.alpha > 0.0
            && cfg.train.rho > 0.0
        {
            let mut all = Vec::with_capacity(split.num_users());
            let gen_stream = epoch_stream.child(9);
            let mut done = 0;
            while done < split.num_users() {
                let end = (done + cfg.train.batch_size).min(split.num_users());
                let rows: Vec<Vec<u32>> = (done..end)
                    .map(|u| split.train_inputs[u].clone())
                    .collect();
                let ids: Vec<usize> = (done..end).collect();
                let b = SequenceBatch::from_rows(&rows, ids, split.max_len);
                all.extend(make_view_pairs(
                    &ckpt.params,
                    &schedule,
                    &cfg,
                    &b,
                    &gen_stream.child(done as u64),
                )?);
                done = end;
            }
            Some(all)
        } else {
            None
        };

        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for (bi, batch) in split
            .batches(cfg.train.batch_size, &epoch_stream.child(0))
            .enumerate()
        {
            let step_stream = epoch_stream.child(100 + bi as u64);
            let batch_pairs: Option<Vec<AugmentedPair>> = cache
                .as_ref()
                .map(|all| batch.rows.iter().map(|&u| all[u].clone()).collect());
            let b = train_step(
                &mut ckpt.params,
                &mut ckpt.adam,
                &batch,
                &cfg,
                &schedule,
                epoch * 1_000_000 + bi,
                &step_stream,
                batch_pairs.as_deref(),
            )?;
            sums.l_rec += b.l_rec;
            sums.l_cl += b.l_cl;
            sums.l_d += b.l_d;
            sums.total += b.total;
            steps += 1;
        }

        let outcome = evaluate_split(
            &ckpt.params.tables,
            &ckpt.params.encoder,
            split,
            EvalStage::Valid,
            &[10],
            cfg.eval.exclude_seen,
            &[],
        )?;
        let stats = EpochStats {
            epoch,
            l_rec: sums.l_rec / steps as f64,
            l_cl: sums.l_cl / steps as f64,
            l_d: sums.l_d / steps as f64,
            total: sums.total / steps as f64,
            valid_hr10: outcome.report.hr[&10],
            valid_ndcg10: outcome.report.ndcg[&10],
        };
        log::info!(
            "epoch {:>3}: total {:.4} (rec {:.4} cl {:.4} d {:.4}) valid ndcg@10 {:.4}",
            stats.epoch,
            stats.total,
            stats.l_rec,
            stats.l_cl,
            stats.l_d,
            stats.valid_ndcg10
        );
        ckpt.history.push(stats.clone());
        ckpt.next_epoch = epoch + 1;

        if stats.valid_ndcg10 > ckpt.best_valid_ndcg {
            ckpt.best_valid_ndcg = stats.valid_ndcg10;
            ckpt.best_epoch = epoch;
            ckpt.best_params = ckpt.params.clone();
        } else if cfg.train.patience > 0 && epoch - ckpt.best_epoch >= cfg.train.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        checkpoint: ckpt,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_splits, sample_markov_corpus, MarkovChain};
    use crate::sr_encoder::score_all;

    fn tiny_config() -> Config {
        let mut c = Config::default();
        c.model.d = 8;
        c.model.layers = 1;
        c.model.heads = 2;
        c.model.dropout = 0.1;
        c.model.denoiser_layers = 1;
        c.data.max_len = 8;
        c.diffusion.t_max = 20;
        c.augment.respace_steps = 4;
        c.train.batch_size = 8;
        c.train.epochs = 2;
        c.train.seed = 7;
        c
    }

    fn tiny_split(seed: u64) -> SplitDataset {
        let chain = MarkovChain::cycle(8);
        let corpus = sample_markov_corpus(16, &chain, (4, 8), &mut SeedStream::new(seed));
        build_splits(&corpus, 8).unwrap()
    }

    #[test]
    fn registration_order_matches_visit_order() {
        let cfg = tiny_config();
        let params: ModelParams<f64> =
            ModelParams::init(&cfg, 8, &mut SeedStream::new(1));
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params);
        let blocks = params.named_blocks();
        assert_eq!(nodes.order.len(), blocks.len());
        for (&id, (name, tensor)) in nodes.order.iter().zip(blocks.iter()) {
            assert_eq!(
                g.value(id),
                *tensor,
                "node/block mismatch for {name}"
            );
        }
    }

    #[test]
    fn alpha_beta_zero_is_pure_rec_and_freezes_denoiser() {
        let mut cfg = tiny_config();
        cfg.train.alpha = 0.0;
        cfg.train.beta = 0.0;
        let split = tiny_split(3);
        let schedule = build_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();
        let mut params: ModelParams<f64> =
            ModelParams::init(&cfg, split.vocab_size, &mut SeedStream::new(2));
        let denoiser_before = serde_json::to_string(&params.denoiser).unwrap();
        let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
        let batch = split.batches(8, &SeedStream::new(5)).next().unwrap();
        let b = train_step(
            &mut params,
            &mut opt,
            &batch,
            &cfg,
            &schedule,
            0,
            &SeedStream::new(9),
            None,
        )
        .unwrap();
        assert_eq!(b.l_cl, 0.0);
        assert_eq!(b.l_d, 0.0);
        assert_eq!(b.total, b.l_rec);
        let denoiser_after = serde_json::to_string(&params.denoiser).unwrap();
        assert_eq!(denoiser_before, denoiser_after, "denoiser must not move");
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let cfg = tiny_config();
        let split = tiny_split(4);
        let schedule = build_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();
        let mut params: ModelParams<f64> =
            ModelParams::init(&cfg, split.vocab_size, &mut SeedStream::new(3));
        let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
        let batch = split.batches(8, &SeedStream::new(6)).next().unwrap();
        let b = train_step(
            &mut params,
            &mut opt,
            &batch,
            &cfg,
            &schedule,
            0,
            &SeedStream::new(11),
            None,
        )
        .unwrap();
        let recomposed = b.l_rec + cfg.train.alpha * b.l_cl + cfg.train.beta * b.l_d;
        assert_eq!(b.total, recomposed);
        assert!(b.l_d > 0.0 && b.l_cl != 0.0);
    }

    #[test]
    fn diffusion_gradients_reach_the_shared_embeddings() {
        // twin steps, identical seeds, alpha = 0; only beta differs. Any
        // difference in SR scores must have flowed through the diffusion
        // loss into the shared tables.
        let split = tiny_split(5);
        let run = |beta: f64| {
            let mut cfg = tiny_config();
            cfg.train.alpha = 0.0;
            cfg.train.beta = beta;
            cfg.model.dropout = 0.0;
            let schedule =
                build_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0)
                    .unwrap();
            let mut params: ModelParams<f64> =
                ModelParams::init(&cfg, split.vocab_size, &mut SeedStream::new(4));
            let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
            let batch = split.batches(8, &SeedStream::new(5)).next().unwrap();
            train_step(
                &mut params,
                &mut opt,
                &batch,
                &cfg,
                &schedule,
                0,
                &SeedStream::new(13),
                None,
            )
            .unwrap();
            params
        };
        let with_diff = run(0.4);
        let without = run(0.0);
        let h = Tensor::from_vec(1, 8, vec![0.1; 8]);
        assert_ne!(
            score_all(&h, &with_diff.tables),
            score_all(&h, &without.tables),
            "diffusion loss left the shared item table untouched"
        );
        assert!(with_diff.tables.item_table.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let cfg = tiny_config();
        let split = tiny_split(6);
        let a = fit::<f32>(&cfg, &split).unwrap();
        let b = fit::<f32>(&cfg, &split).unwrap();
        assert_eq!(a.checkpoint.history.len(), b.checkpoint.history.len());
        for (x, y) in a.checkpoint.history.iter().zip(b.checkpoint.history.iter()) {
            assert!((x.total - y.total).abs() < 1e-6);
            assert_eq!(x.valid_ndcg10, y.valid_ndcg10);
        }
    }

    #[test]
    fn resume_equals_uninterrupted_run() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 4;
        let split = tiny_split(7);
        let full = fit::<f64>(&cfg, &split).unwrap();

        let mut cfg_half = cfg.clone();
        cfg_half.train.epochs = 2;
        let half = fit::<f64>(&cfg_half, &split).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        half.checkpoint.save(&path).unwrap();

        let mut restored: Checkpoint<f64> = Checkpoint::load(&path).unwrap();
        restored.config.train.epochs = 4;
        let resumed = fit_from(restored, &split).unwrap();

        assert_eq!(full.checkpoint.history.len(), resumed.checkpoint.history.len());
        for (x, y) in full
            .checkpoint
            .history
            .iter()
            .zip(resumed.checkpoint.history.iter())
        {
            assert!(
                (x.total - y.total).abs() < 1e-6,
                "epoch {}: {} vs {}",
                x.epoch,
                x.total,
                y.total
            );
        }
        // final parameters bit-identical through the JSON round trip
        assert_eq!(
            serde_json::to_string(&full.checkpoint.params).unwrap(),
            serde_json::to_string(&resumed.checkpoint.params).unwrap()
        );
    }

    #[test]
    fn flat_validation_stops_within_patience() {
        let mut cfg = tiny_config();
        cfg.train.lr = 0.0; // nothing moves: validation metric is flat
        cfg.train.epochs = 50;
        cfg.train.patience = 5;
        let split = tiny_split(8);
        let res = fit::<f32>(&cfg, &split).unwrap();
        assert!(res.stopped_early);
        assert_eq!(res.checkpoint.best_epoch, 0);
        // best at epoch 0, then patience more epochs, nothing after
        assert_eq!(res.checkpoint.history.len(), 1 + cfg.train.patience);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let cfg = tiny_config();
        let split = tiny_split(9);
        let schedule = build_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();
        let mut params: ModelParams<f64> =
            ModelParams::init(&cfg, split.vocab_size, &mut SeedStream::new(5));
        // poison one encoder weight
        params.encoder.blocks[0].wq.set(0, 0, f64::INFINITY);
        let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
        let batch = split.batches(8, &SeedStream::new(7)).next().unwrap();
        let err = train_step(
            &mut params,
            &mut opt,
            &batch,
            &cfg,
            &schedule,
            3,
            &SeedStream::new(15),
            None,
        )
        .unwrap_err();
        match err {
            CadirecError::NonFiniteLoss { step, .. } => assert_eq!(step, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn view_generation_carries_no_gradient_into_the_denoiser() {
        // contrastive-only training: denoiser parameters receive exactly
        // zero gradient because sampling sits outside the tape
        let mut cfg = tiny_config();
        cfg.train.alpha = 0.5;
        cfg.train.beta = 0.0;
        let split = tiny_split(10);
        let schedule = build_schedule(cfg.diffusion.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0).unwrap();
        let mut params: ModelParams<f64> =
            ModelParams::init(&cfg, split.vocab_size, &mut SeedStream::new(6));
        let denoiser_before = serde_json::to_string(&params.denoiser).unwrap();
        let mut opt = Adam::new(cfg.train.lr, &params.block_shapes());
        let batch = split.batches(8, &SeedStream::new(8)).next().unwrap();
        let b = train_step(
            &mut params,
            &mut opt,
            &batch,
            &cfg,
            &schedule,
            0,
            &SeedStream::new(17),
            None,
        )
        .unwrap();
        assert!(b.l_cl != 0.0, "contrastive term must be active");
        assert_eq!(
            denoiser_before,
            serde_json::to_string(&params.denoiser).unwrap()
        );
    }

    #[test]
    fn cycle_corpus_memorization_drives_rec_loss_down() {
        // 50-user fully predictable corpus: the model must be able to
        // overfit the recommendation loss to below 0.1
        let chain = MarkovChain::cycle(8);
        let corpus = sample_markov_corpus(50, &chain, (6, 10), &mut SeedStream::new(20));
        let split = build_splits(&corpus, 10).unwrap();
        let mut cfg = tiny_config();
        cfg.data.max_len = 10;
        cfg.model.d = 16;
        cfg.model.dropout = 0.0;
        cfg.train.alpha = 0.0;
        cfg.train.beta = 0.0;
        cfg.train.lr = 3e-3;
        cfg.train.epochs = 200;
        cfg.train.patience = 0; // no early stop: watch the training loss
        cfg.train.batch_size = 50;
        let res = fit::<f32>(&cfg, &split).unwrap();
        let min_rec = res
            .checkpoint
            .history
            .iter()
            .map(|h| h.l_rec)
            .fold(f64::INFINITY, f64::min);
        assert!(
            min_rec < 0.1,
            "memorization failed: best training L_rec {min_rec}"
        );
    }
}
