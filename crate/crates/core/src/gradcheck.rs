//! Central-difference verification of the analytic gradients, block by
//! block, on toy dimensions. Runs in f64 with step 1e-4; dropout is
//! disabled (the masks are not differentiable noise).
//!
//! Every random draw the losses depend on (supervision pairs, noising
//! masks, diffusion noise, view rows) is frozen up front, making each loss
//! a pure function of the parameters.

use serde::{Deserialize, Serialize};

use crate::augment::random_pair;
use crate::config::Config;
use crate::contrastive::cl_loss_graph;
use crate::corpus::SequenceBatch;
use crate::diffusion::{
    build_schedule, diffusion_loss_graph, draw_diffusion, DiffusionDraws, NoiseSchedule,
};
use crate::error::{CadirecError, Result};
use crate::graph::Graph;
use crate::rng::SeedStream;
use crate::sr_encoder::{
    draw_supervision, encode_graph, last_states, rec_loss_graph, Mode, RecSupervision,
};
use crate::tensor::Tensor;
use crate::trainer::{register_params, ModelParams};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Relative-error denominator floor; keeps near-zero gradients from
/// dividing by ~0 while staying far above f64 finite-difference noise.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rec,
    Cl,
    D,
    Total,
}

impl LossKind {
    pub fn all() -> [LossKind; 4] {
        [LossKind::Rec, LossKind::Cl, LossKind::D, LossKind::Total]
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Rec => "rec",
            LossKind::Cl => "cl",
            LossKind::D => "d",
            LossKind::Total => "total",
        }
    }
}

/// Toy problem dimensions; the defaults keep a full check under a minute.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ToyDims {
    pub d: usize,
    pub n: usize,
    pub vocab: usize,
    pub batch: usize,
    pub t_max: usize,
}

impl Default for ToyDims {
    fn default() -> Self {
        ToyDims {
            d: 6,
            n: 5,
            vocab: 12,
            batch: 3,
            t_max: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub n_params: usize,
    pub max_rel_err: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss_kind: String,
    pub dims: ToyDims,
    pub seed: u64,
    pub tolerance: f64,
    pub fd_step: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Frozen inputs shared by every loss evaluation.
struct CheckEnv {
    cfg: Config,
    batch: SequenceBatch,
    view1: SequenceBatch,
    view2: SequenceBatch,
    sup: RecSupervision,
    draws: DiffusionDraws<f64>,
    schedule: NoiseSchedule<f64>,
}

fn toy_config(dims: ToyDims, seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.model.d = dims.d;
    cfg.model.layers = 1;
    cfg.model.heads = 2;
    cfg.model.dropout = 0.0; // dropout is disabled during grad checks
    cfg.model.denoiser_layers = 1;
    cfg.model.denoiser_heads = 2;
    cfg.model.init_std = 0.25; // large enough that nothing sits in a flat region
    cfg.data.max_len = dims.n;
    cfg.diffusion.t_max = dims.t_max;
    cfg.train.alpha = 1.0;
    cfg.train.beta = 1.0;
    cfg.train.rho = 0.5;
    cfg.train.seed = seed;
    cfg
}

fn build_env(dims: ToyDims, seed: u64) -> CheckEnv {
    let cfg = toy_config(dims, seed);
    let stream = SeedStream::new(seed ^ 0xfeed);
    // rows of mixed lengths, including a single-item row, to exercise padding
    let rows: Vec<Vec<u32>> = (0..dims.batch)
        .map(|r| {
            let len = 1 + (r * 2) % dims.n.max(2);
            let mut s = stream.child(r as u64);
            (0..len.max(1))
                .map(|_| (s.below(dims.vocab) + 1) as u32)
                .collect()
        })
        .collect();
    let batch = SequenceBatch::from_rows(&rows, (0..dims.batch).collect(), dims.n);
    // frozen views via random substitution (the CL gradient path does not
    // depend on how the views were produced)
    let pairs: Vec<_> = (0..dims.batch)
        .map(|r| {
            random_pair(
                &batch.unpadded_row(r),
                cfg.train.rho,
                dims.vocab,
                &stream.child(100 + r as u64),
            )
        })
        .collect();
    let view1 = batch.with_rows(&pairs.iter().map(|p| p.view1.clone()).collect::<Vec<_>>());
    let view2 = batch.with_rows(&pairs.iter().map(|p| p.view2.clone()).collect::<Vec<_>>());
    let sup = draw_supervision(&batch, dims.vocab, &mut stream.child(200));
    let schedule = build_schedule(dims.t_max, cfg.diffusion.schedule, cfg.diffusion.beta0)
        .expect("toy schedule");
    let draws = draw_diffusion::<f64>(
        &batch,
        cfg.train.rho,
        dims.t_max,
        dims.d,
        &mut stream.child(300),
    );
    CheckEnv {
        cfg,
        batch,
        view1,
        view2,
        sup,
        draws,
        schedule,
    }
}

/// Build the requested loss as a tape over the given parameters and return
/// (graph, loss node). Pure in (params, env).
fn build_loss(
    kind: LossKind,
    params: &ModelParams<f64>,
    env: &CheckEnv,
) -> (Graph<f64>, crate::graph::NodeId, Vec<crate::graph::NodeId>) {
    let mut g: Graph<f64> = Graph::new();
    let nodes = register_params(&mut g, params);
    let mut silent = SeedStream::new(0);
    let heads = params.encoder.heads;

    let rec = |g: &mut Graph<f64>| {
        let mut s = SeedStream::new(0);
        let h = encode_graph(
            g,
            &nodes.tables,
            &nodes.encoder,
            heads,
            0.0,
            &env.batch,
            Mode::Eval,
            &mut s,
        );
        rec_loss_graph(g, h, nodes.tables.item, &env.sup)
    };
    let cl = |g: &mut Graph<f64>| {
        let mut s = SeedStream::new(0);
        let h1 = encode_graph(
            g,
            &nodes.tables,
            &nodes.encoder,
            heads,
            0.0,
            &env.view1,
            Mode::Eval,
            &mut s,
        );
        let h2 = encode_graph(
            g,
            &nodes.tables,
            &nodes.encoder,
            heads,
            0.0,
            &env.view2,
            Mode::Eval,
            &mut s,
        );
        let h1_last = last_states(g, h1, env.view1.batch, env.view1.seq);
        let h2_last = last_states(g, h2, env.view2.batch, env.view2.seq);
        cl_loss_graph(g, h1_last, h2_last, env.cfg.contrastive.temperature)
    };
    let diff = |g: &mut Graph<f64>, s: &mut SeedStream| {
        diffusion_loss_graph(
            g,
            &nodes.tables,
            &nodes.denoiser,
            &env.batch,
            &env.draws,
            &env.schedule,
            env.cfg.diffusion.rounding_full_sequence,
            Mode::Eval,
            s,
        )
        .total
    };

    let loss = match kind {
        LossKind::Rec => rec(&mut g),
        LossKind::Cl => cl(&mut g),
        LossKind::D => diff(&mut g, &mut silent),
        LossKind::Total => {
            let r = rec(&mut g);
            let c = cl(&mut g);
            let d = diff(&mut g, &mut silent);
            let rc = g.add_scaled(r, c, env.cfg.train.alpha);
            g.add_scaled(rc, d, env.cfg.train.beta)
        }
    };
    (g, loss, nodes.order)
}

fn loss_value(kind: LossKind, params: &ModelParams<f64>, env: &CheckEnv) -> f64 {
    let (g, loss, _) = build_loss(kind, params, env);
    g.value(loss).item()
}

/// Compare analytic and central-difference gradients for every trainable
/// block. Fails with the block name if an analytic gradient is non-finite.
pub fn grad_check(kind: LossKind, dims: ToyDims, seed: u64) -> Result<GradCheckReport> {
    let env = build_env(dims, seed);
    let mut init_stream = SeedStream::new(seed);
    let params: ModelParams<f64> = ModelParams::init(&env.cfg, dims.vocab, &mut init_stream);

    let (g, loss, order) = build_loss(kind, &params, &env);
    let mut grads_by_node = g.backward(loss);
    let shapes = params.block_shapes();
    let names: Vec<String> = params.named_blocks().iter().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<Tensor<f64>> = order
        .iter()
        .zip(shapes.iter())
        .map(|(&id, &(r, c))| grads_by_node.take_or_zeros(id, r, c))
        .collect();
    drop(g);

    for (name, t) in names.iter().zip(analytic.iter()) {
        if !t.is_finite() {
            return Err(CadirecError::Contract(format!(
                "non-finite analytic gradient in block {name}"
            )));
        }
    }

    let mut blocks = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (bi, name) in names.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let n_params = analytic[bi].len();
        for e in 0..n_params {
            let original = get_block_elem(&probe, bi, e);
            set_block_elem(&mut probe, bi, e, original + FD_STEP);
            let up = loss_value(kind, &probe, &env);
            set_block_elem(&mut probe, bi, e, original - FD_STEP);
            let down = loss_value(kind, &probe, &env);
            set_block_elem(&mut probe, bi, e, original);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let ana = analytic[bi].data()[e];
            let rel = (ana - numeric).abs() / ana.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        worst = worst.max(max_rel);
        blocks.push(BlockReport {
            name: name.clone(),
            n_params,
            max_rel_err: max_rel,
            analytic_norm: analytic[bi].frobenius_norm(),
        });
    }

    Ok(GradCheckReport {
        loss_kind: kind.name().into(),
        dims,
        seed,
        tolerance: TOLERANCE,
        fd_step: FD_STEP,
        blocks,
        max_rel_err: worst,
        passed: worst < TOLERANCE,
    })
}

fn get_block_elem(params: &ModelParams<f64>, block: usize, elem: usize) -> f64 {
    params.named_blocks()[block].1.data()[elem]
}

fn set_block_elem(params: &mut ModelParams<f64>, block: usize, elem: usize, value: f64) {
    let mut idx = 0;
    params.visit_mut(&mut |_n, t| {
        if idx == block {
            t.data_mut()[elem] = value;
        }
        idx += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rec_loss_gradients_match_central_differences() {
        let report = grad_check(LossKind::Rec, ToyDims::default(), 11).unwrap();
        assert!(
            report.passed,
            "max rel err {} in blocks {:?}",
            report.max_rel_err,
            report
                .blocks
                .iter()
                .filter(|b| b.max_rel_err >= TOLERANCE)
                .map(|b| (&b.name, b.max_rel_err))
                .collect::<Vec<_>>()
        );
        // rec loss never touches the denoiser: both gradient routes must
        // agree on exactly zero
        for b in &report.blocks {
            if b.name.starts_with("den.") {
                assert_eq!(b.analytic_norm, 0.0, "{} has spurious gradient", b.name);
                assert_eq!(b.max_rel_err, 0.0);
            }
        }
    }

    #[test]
    fn cl_loss_gradients_match_central_differences() {
        let report = grad_check(LossKind::Cl, ToyDims::default(), 12).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        for b in &report.blocks {
            if b.name.starts_with("den.") {
                assert_eq!(b.analytic_norm, 0.0);
            }
        }
    }

    #[test]
    fn diffusion_loss_gradients_match_central_differences() {
        let report = grad_check(LossKind::D, ToyDims::default(), 13).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        // shared-embedding coupling: the diffusion loss must reach the
        // item table
        let item = report.blocks.iter().find(|b| b.name == "item_table").unwrap();
        assert!(item.analytic_norm > 0.0);
    }

    #[test]
    fn total_loss_gradients_match_central_differences() {
        let report = grad_check(LossKind::Total, ToyDims::default(), 14).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        // with alpha = beta = 1 every block is live except biases that may
        // be zero by coincidence; spot-check the big ones
        for name in ["item_table", "pos_table", "enc.l0.wq", "den.l0.wq", "den.step_table"] {
            let b = report.blocks.iter().find(|b| b.name == name).unwrap();
            assert!(b.analytic_norm > 0.0, "{name} unexpectedly dead");
        }
    }

    #[test]
    fn report_covers_every_trainable_block() {
        let report = grad_check(LossKind::Rec, ToyDims::default(), 15).unwrap();
        let names: Vec<&str> = report.blocks.iter().map(|b| b.name.as_str()).collect();
        for required in [
            "item_table",
            "pos_table",
            "enc.l0.wq",
            "enc.ln_f_g",
            "den.l0.wq",
            "den.out_w",
            "den.step_table",
        ] {
            assert!(names.contains(&required), "missing block {required}");
        }
    }
}
