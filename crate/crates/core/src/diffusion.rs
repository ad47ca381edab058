//! Embedding-space diffusion: noise schedule, discrete-to-continuous
//! transition, partial-position forward noising, the bidirectional
//! denoiser, tied rounding logits, and the simplified training loss.
//!
//! Only positions selected by the noising mask are corrupted; the rest keep
//! their clean latents and act as conditioning context for the denoiser.
//! The denoiser predicts the clean latent `z₀` directly.

use serde::{Deserialize, Serialize};

use crate::augment::select_positions;
use crate::corpus::SequenceBatch;
use crate::embed::{lookup_node, EmbeddingTables, TableNodes};
use crate::error::{CadirecError, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::sr_encoder::{stack_forward, BlockNodes, MixerKind, Mode, StackSpec, TransformerBlock};
use crate::tensor::Tensor;

pub const LINEAR_BETA_MIN: f64 = 1e-4;
pub const LINEAR_BETA_MAX: f64 = 0.02;


#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Sqrt,
}

impl std::str::FromStr for ScheduleKind {
    type Err = CadirecError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            other => Err(CadirecError::Config(format!(
                "unknown schedule kind {other:?} (expected linear|sqrt)"
            ))),
        }
    }
}

/// Variance schedule. `beta[0]` is the embedding-transition variance β₀;
/// `beta[t]` for t ≥ 1 drives the forward chain. `alpha_bar[t]` is
/// Π_{s≤t}(1-β_s) with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule<T> {
    pub t_max: usize,
    pub beta: Vec<T>,
    pub alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn beta0(&self) -> T {
        self.beta[0]
    }
}

pub fn build_schedule<T: Scalar>(
    t_max: usize,
    kind: ScheduleKind,
    beta0: f64,
) -> Result<NoiseSchedule<T>> {
    if t_max < 1 {
        return Err(CadirecError::Config("diffusion.T must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&beta0) {
        return Err(CadirecError::Config("diffusion.beta0 must be in [0,1)".into()));
    }
    let mut beta = Vec::with_capacity(t_max + 1);
    beta.push(T::from_f64_c(beta0));
    match kind {
        ScheduleKind::Linear => {
            for t in 1..=t_max {
                let b = if t_max == 1 {
                    LINEAR_BETA_MIN
                } else {
                    LINEAR_BETA_MIN
                        + (t - 1) as f64 / (t_max - 1) as f64 * (LINEAR_BETA_MAX - LINEAR_BETA_MIN)
                };
                beta.push(T::from_f64_c(b));
            }
        }
        ScheduleKind::Sqrt => {
            // beta interpolated on a square-root grid: rises fast early,
            // flattens late, same endpoints as the linear schedule
            for t in 1..=t_max {
                let u = if t_max == 1 {
                    0.0
                } else {
                    ((t - 1) as f64 / (t_max - 1) as f64).sqrt()
                };
                let b = LINEAR_BETA_MIN + u * (LINEAR_BETA_MAX - LINEAR_BETA_MIN);
                beta.push(T::from_f64_c(b));
            }
        }
    }
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(T::one());
    for t in 1..=t_max {
        alpha_bar.push(alpha_bar[t - 1] * (T::one() - beta[t]));
    }
    for t in 1..=t_max {
        assert!(
            beta[t] > T::zero() && beta[t] < T::one(),
            "beta out of (0,1) at t={t}"
        );
        assert!(alpha_bar[t] < alpha_bar[t - 1], "alpha_bar not decreasing");
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha_bar,
    })
}

// ---------------------------------------------------------------------------
// Noising mask
// ---------------------------------------------------------------------------

/// Positions being noised (training) or generated (augmentation), flat over
/// `[batch × seq]`. Selected positions are never padding.
#[derive(Debug, Clone)]
pub struct NoisingMask {
    pub selected: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
    pub count: usize,
}

impl NoisingMask {
    pub fn from_position_sets(batch: &SequenceBatch, sets: &[Vec<usize>]) -> Result<Self> {
        assert_eq!(sets.len(), batch.batch);
        let mut selected = vec![false; batch.batch * batch.seq];
        let mut count = 0;
        for (r, set) in sets.iter().enumerate() {
            let off = batch.seq - batch.lengths[r];
            for &p in set {
                if p >= batch.lengths[r] {
                    return Err(CadirecError::Contract(format!(
                        "selected position {p} overlaps padding (row length {})",
                        batch.lengths[r]
                    )));
                }
                let flat = r * batch.seq + off + p;
                if !selected[flat] {
                    selected[flat] = true;
                    count += 1;
                }
            }
        }
        Ok(NoisingMask {
            selected,
            batch: batch.batch,
            seq: batch.seq,
            count,
        })
    }

    pub fn weights<T: Scalar>(&self) -> Vec<T> {
        self.selected
            .iter()
            .map(|&s| if s { T::one() } else { T::zero() })
            .collect()
    }

    /// Flat indices of the selected positions, ascending.
    pub fn selected_indices(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

/// Draw one noising mask over the batch with per-row position sets of size
/// `round(ρ·len)` (at least 1 when ρ > 0 and len ≥ 2).
pub fn build_noising_mask(
    batch: &SequenceBatch,
    rho: f64,
    stream: &mut SeedStream,
) -> NoisingMask {
    let sets: Vec<Vec<usize>> = (0..batch.batch)
        .map(|r| select_positions(batch.lengths[r], rho, &mut stream.child(r as u64)))
        .collect();
    NoisingMask::from_position_sets(batch, &sets).expect("select_positions stays inside the row")
}

// ---------------------------------------------------------------------------
// Forward process (plain-tensor forms used by tests and generation)
// ---------------------------------------------------------------------------

/// `z₀ ~ N(e, β₀·I)` at non-pad positions; pad positions are zero.
pub fn embed_transition<T: Scalar>(
    batch: &SequenceBatch,
    tables: &EmbeddingTables<T>,
    schedule: &NoiseSchedule<T>,
    stream: &mut SeedStream,
) -> Tensor<T> {
    let e = tables.lookup(&batch.items).expect("batch ids in range");
    let std = schedule.beta0().sqrt();
    let mut z0 = e;
    for r in 0..z0.rows() {
        if batch.pad_mask[r] {
            for v in z0.row_mut(r) {
                *v = T::zero();
            }
        } else if std > T::zero() {
            for v in z0.row_mut(r) {
                *v += std * T::standard_normal(stream.rng());
            }
        }
    }
    z0
}

/// Closed-form marginal `q(z_t | z₀)` applied at selected positions only;
/// unselected positions keep `z₀` exactly (context clamp).
pub fn forward_noise<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    mask: &NoisingMask,
    schedule: &NoiseSchedule<T>,
    stream: &mut SeedStream,
) -> Tensor<T> {
    assert!(t >= 1 && t <= schedule.t_max, "t out of [1,T]");
    let ab = schedule.alpha_bar[t];
    let scale = ab.sqrt();
    let noise_std = (T::one() - ab).sqrt();
    let mut zt = z0.clone();
    for r in 0..zt.rows() {
        if mask.selected[r] {
            for v in zt.row_mut(r) {
                *v = scale * *v + noise_std * T::standard_normal(stream.rng());
            }
        }
    }
    zt
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Bidirectional denoiser weights: block stack, final norm, output head,
/// and the diffusion-step embedding table `[T × d]` (row t-1 encodes step t).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserWeights<T> {
    pub kind: MixerKind,
    pub blocks: Vec<TransformerBlock<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
    pub step_table: Tensor<T>,
    pub heads: usize,
    pub dropout: f64,
}

impl<T: Scalar> DenoiserWeights<T> {
    pub fn init(
        d: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
        t_max: usize,
        kind: MixerKind,
        std: T,
        stream: &mut SeedStream,
    ) -> Self {
        assert_eq!(d % heads, 0, "d must be divisible by heads");
        DenoiserWeights {
            kind,
            blocks: (0..layers)
                .map(|l| TransformerBlock::init(d, std, &mut stream.child(l as u64)))
                .collect(),
            ln_f_g: Tensor::filled(1, d, T::one()),
            ln_f_b: Tensor::zeros(1, d),
            out_w: Tensor::randn(d, d, std, &mut stream.child(100)),
            out_b: Tensor::zeros(1, d),
            step_table: Tensor::randn(t_max, d, std, &mut stream.child(101)),
            heads,
            dropout,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("den.l{i}"), f);
        }
        f("den.ln_f_g".into(), &self.ln_f_g);
        f("den.ln_f_b".into(), &self.ln_f_b);
        f("den.out_w".into(), &self.out_w);
        f("den.out_b".into(), &self.out_b);
        f("den.step_table".into(), &self.step_table);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("den.l{i}"), f);
        }
        f("den.ln_f_g".into(), &mut self.ln_f_g);
        f("den.ln_f_b".into(), &mut self.ln_f_b);
        f("den.out_w".into(), &mut self.out_w);
        f("den.out_b".into(), &mut self.out_b);
        f("den.step_table".into(), &mut self.step_table);
    }
}

pub struct DenoiserNodes {
    pub blocks: Vec<BlockNodes>,
    pub ln_f: (NodeId, NodeId),
    pub out_w: NodeId,
    pub out_b: NodeId,
    pub step_table: NodeId,
    pub kind: MixerKind,
    pub heads: usize,
    pub dropout: f64,
}

impl DenoiserNodes {
    pub fn register<T: Scalar>(g: &mut Graph<T>, w: &DenoiserWeights<T>) -> Self {
        DenoiserNodes {
            blocks: w.blocks.iter().map(|b| BlockNodes::register(g, b)).collect(),
            ln_f: (g.leaf(w.ln_f_g.clone()), g.leaf(w.ln_f_b.clone())),
            out_w: g.leaf(w.out_w.clone()),
            out_b: g.leaf(w.out_b.clone()),
            step_table: g.leaf(w.step_table.clone()),
            kind: w.kind,
            heads: w.heads,
            dropout: w.dropout,
        }
    }
}

/// `f_θ(z_t, t)`: bidirectional attention over non-pad positions; the input
/// is `z_t` plus the shared positional encoding plus the step encoding of
/// each row's `t`. Output predicts `z₀`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_graph<T: Scalar>(
    g: &mut Graph<T>,
    pos_table: NodeId,
    den: &DenoiserNodes,
    zt: NodeId,
    ts: &[usize],
    pad_mask: &[bool],
    batch: usize,
    seq: usize,
    mode: Mode,
    stream: &mut SeedStream,
) -> NodeId {
    assert_eq!(ts.len(), batch, "one diffusion step per row");
    let t_rows = g.value(den.step_table).rows();
    for &t in ts {
        assert!(t >= 1 && t <= t_rows, "step {t} outside [1,{t_rows}]");
    }
    let rows = batch * seq;
    let pos_ids: Vec<usize> = (0..rows).map(|r| r % seq).collect();
    let pos = g.gather_rows(pos_table, pos_ids);
    let step_ids: Vec<usize> = (0..rows).map(|r| ts[r / seq] - 1).collect();
    let step = g.gather_rows(den.step_table, step_ids);
    let x0 = g.add(zt, pos);
    let x = g.add(x0, step);
    let spec = StackSpec {
        blocks: &den.blocks,
        final_ln: den.ln_f,
        heads: den.heads,
        causal: false,
        mixer: den.kind,
        dropout: den.dropout,
    };
    let h = stack_forward(g, x, &spec, batch, seq, pad_mask, mode, stream);
    let o = g.matmul(h, den.out_w);
    g.add_bias(o, den.out_b)
}

/// Tied rounding logits `z·Mᵀ` over item rows 1..|V| (plain form for
/// generation-time argmax snapping).
pub fn rounding_logits<T: Scalar>(z: &Tensor<T>, tables: &EmbeddingTables<T>) -> Tensor<T> {
    let v = tables.vocab_size();
    let d = tables.dim();
    let mut out = Tensor::zeros(z.rows(), v);
    for r in 0..z.rows() {
        let zrow = z.row(r);
        let orow = out.row_mut(r);
        for (j, o) in orow.iter_mut().enumerate() {
            let erow = tables.item_table.row(j + 1);
            let mut s = T::zero();
            for c in 0..d {
                s += zrow[c] * erow[c];
            }
            *o = s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

/// All random draws the loss depends on, fixed up front so the loss is a
/// pure function of the parameters (required by the gradient checks).
#[derive(Debug, Clone)]
pub struct DiffusionDraws<T> {
    pub mask: NoisingMask,
    /// Per-row step for the main reconstruction term, in `[2, T]`.
    pub ts: Vec<usize>,
    /// Embedding-transition noise, raw standard normal at non-pad rows.
    pub eps0: Tensor<T>,
    /// Forward noise at `t`, raw standard normal at selected rows.
    pub eps_t: Tensor<T>,
    /// Forward noise at `t = 1`, raw standard normal at selected rows.
    pub eps_1: Tensor<T>,
}

pub fn draw_diffusion<T: Scalar>(
    batch: &SequenceBatch,
    rho: f64,
    t_max: usize,
    dim: usize,
    stream: &mut SeedStream,
) -> DiffusionDraws<T> {
    let mask = build_noising_mask(batch, rho, &mut stream.child(0));
    let mut s_t = stream.child(1);
    // term 1 samples t uniformly in [2, T]; 1 is covered by the second term
    let ts: Vec<usize> = (0..batch.batch)
        .map(|_| {
            if t_max <= 2 {
                t_max.max(2).min(t_max)
            } else {
                2 + s_t.below(t_max - 1)
            }
        })
        .collect();
    let rows = batch.batch * batch.seq;
    let masked_randn = |tag: u64, keep: &dyn Fn(usize) -> bool| {
        let mut s = stream.child(tag);
        let mut t = Tensor::zeros(rows, dim);
        for r in 0..rows {
            if keep(r) {
                for v in t.row_mut(r) {
                    *v = T::standard_normal(s.rng());
                }
            }
        }
        t
    };
    let pad = batch.pad_mask.clone();
    let eps0 = masked_randn(2, &|r| !pad[r]);
    let sel = mask.selected.clone();
    let eps_t = masked_randn(3, &|r| sel[r]);
    let eps_1 = masked_randn(4, &|r| sel[r]);
    DiffusionDraws {
        mask,
        ts,
        eps0,
        eps_t,
        eps_1,
    }
}

pub struct DiffusionLossNodes {
    pub total: NodeId,
    pub recon_t: Option<NodeId>,
    pub recon_1: Option<NodeId>,
    pub rounding: Option<NodeId>,
}

/// Simplified diffusion objective on one batch:
/// `‖z̃₀ − f̃_θ(z_t,t)‖² + ‖ẽ − f̃_θ(z₁,1)‖² − log p_θ(s|z₀)`, restricted to
/// the selected positions and mean-reduced per selected position. With
/// `rounding_full` the rounding term instead averages over every non-pad
/// position.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    tables: &TableNodes,
    den: &DenoiserNodes,
    batch: &SequenceBatch,
    draws: &DiffusionDraws<T>,
    schedule: &NoiseSchedule<T>,
    rounding_full: bool,
    mode: Mode,
    stream: &mut SeedStream,
) -> DiffusionLossNodes {
    let den_fn = |g: &mut Graph<T>, zt: NodeId, ts: &[usize], stream: &mut SeedStream, tag: u64| {
        let mut s = stream.child(tag);
        denoise_graph(
            g,
            tables.pos,
            den,
            zt,
            ts,
            &batch.pad_mask,
            batch.batch,
            batch.seq,
            mode,
            &mut s,
        )
    };
    diffusion_loss_graph_with(g, tables, batch, draws, schedule, rounding_full, stream, den_fn)
}

/// Loss builder parameterized over the denoiser call, so tests can inject
/// an oracle denoiser (e.g. the identity on `z₀`).
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_graph_with<T, F>(
    g: &mut Graph<T>,
    tables: &TableNodes,
    batch: &SequenceBatch,
    draws: &DiffusionDraws<T>,
    schedule: &NoiseSchedule<T>,
    rounding_full: bool,
    stream: &mut SeedStream,
    denoise_fn: F,
) -> DiffusionLossNodes
where
    T: Scalar,
    F: Fn(&mut Graph<T>, NodeId, &[usize], &mut SeedStream, u64) -> NodeId,
{
    let mask = &draws.mask;
    if mask.count == 0 {
        log::warn!("diffusion loss skipped: no selected positions (rho too small?)");
        return DiffusionLossNodes {
            total: g.leaf(Tensor::scalar(T::zero())),
            recon_t: None,
            recon_1: None,
            rounding: None,
        };
    }
    let rows = batch.batch * batch.seq;
    let dim = draws.eps0.cols();

    // z0 = e + sqrt(beta0)·eps at non-pad, zero at pad
    let e = lookup_node(g, tables.item, &batch.items);
    let beta0_std = schedule.beta0().sqrt();
    let pad_scale: Vec<T> = batch
        .pad_mask
        .iter()
        .map(|&p| if p { T::zero() } else { T::one() })
        .collect();
    let mut shift0 = draws.eps0.clone();
    shift0.scale_assign(beta0_std);
    let z0 = g.row_affine(e, pad_scale, shift0);

    // z_t = sqrt(ab_t)·z0 + sqrt(1-ab_t)·eps at selected, z0 elsewhere
    let mut scale_t = vec![T::one(); rows];
    let mut shift_t = Tensor::zeros(rows, dim);
    for r in 0..rows {
        if mask.selected[r] {
            let ab = schedule.alpha_bar[draws.ts[r / batch.seq]];
            scale_t[r] = ab.sqrt();
            let c = (T::one() - ab).sqrt();
            let src = draws.eps_t.row(r);
            for (o, &x) in shift_t.row_mut(r).iter_mut().zip(src) {
                *o = c * x;
            }
        }
    }
    let zt = g.row_affine(z0, scale_t, shift_t);
    let f_t = denoise_fn(g, zt, &draws.ts, stream, 10);
    let recon_t = g.masked_sq_diff(z0, f_t, mask.weights());

    // z_1 with fresh noise; target is the clean embedding e
    let ab1 = schedule.alpha_bar[1];
    let mut scale_1 = vec![T::one(); rows];
    let mut shift_1 = Tensor::zeros(rows, dim);
    for r in 0..rows {
        if mask.selected[r] {
            scale_1[r] = ab1.sqrt();
            let c = (T::one() - ab1).sqrt();
            let src = draws.eps_1.row(r);
            for (o, &x) in shift_1.row_mut(r).iter_mut().zip(src) {
                *o = c * x;
            }
        }
    }
    let z1 = g.row_affine(z0, scale_1, shift_1);
    let ones_ts = vec![1usize; batch.batch];
    let f_1 = denoise_fn(g, z1, &ones_ts, stream, 11);
    let recon_1 = g.masked_sq_diff(e, f_1, mask.weights());

    // rounding term: -log p(s|z0) over selected (or all non-pad) positions
    let rounding_rows: Vec<usize> = if rounding_full {
        (0..rows).filter(|&r| !batch.pad_mask[r]).collect()
    } else {
        mask.selected_indices()
    };
    let targets: Vec<usize> = rounding_rows
        .iter()
        .map(|&r| batch.items[r] as usize - 1)
        .collect();
    let z0_sel = g.gather_rows(z0, rounding_rows.clone());
    let logits = g.tied_logits(z0_sel, tables.item);
    let ce = g.softmax_ce(logits, targets);
    let ones = Tensor::filled(rounding_rows.len(), 1, T::one());
    let rounding_sum = g.weighted_sum(ce, ones);

    let inv_sel = T::from_usize_c(mask.count).recip();
    let recon = g.add(recon_t, recon_1);
    let total = if rounding_full {
        let recon_mean = g.scale(recon, inv_sel);
        let inv_np = T::from_usize_c(rounding_rows.len()).recip();
        let rounding_mean = g.scale(rounding_sum, inv_np);
        g.add(recon_mean, rounding_mean)
    } else {
        let s = g.add(recon, rounding_sum);
        g.scale(s, inv_sel)
    };
    DiffusionLossNodes {
        total,
        recon_t: Some(recon_t),
        recon_1: Some(recon_1),
        rounding: Some(rounding_sum),
    }
}

// ---------------------------------------------------------------------------
// Reverse-process helpers (shared with view generation)
// ---------------------------------------------------------------------------

/// Evenly spaced descending step grid from T to 1 with at most `steps`
/// entries (respacing).
pub fn respaced_grid(t_max: usize, steps: usize) -> Vec<usize> {
    let s = steps.clamp(1, t_max);
    let mut ts: Vec<usize> = if s == 1 {
        vec![t_max]
    } else {
        (0..s)
            .map(|k| 1 + ((t_max - 1) as f64 * k as f64 / (s - 1) as f64).round() as usize)
            .collect()
    };
    ts.dedup();
    ts.reverse();
    ts
}

/// Posterior coefficients for the (respaced) step `t -> t_prev`
/// (`t_prev = 0` denotes the clean end, with ᾱ₀ = 1):
/// mean = coef_z0·ẑ₀ + coef_zt·z_t, std = sigma.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorCoefs<T> {
    pub coef_z0: T,
    pub coef_zt: T,
    pub sigma: T,
}

pub fn posterior_coefs<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    t: usize,
    t_prev: usize,
) -> PosteriorCoefs<T> {
    assert!(t >= 1 && t <= schedule.t_max && t_prev < t);
    let ab_t = schedule.alpha_bar[t];
    let ab_prev = schedule.alpha_bar[t_prev];
    let beta_eff = T::one() - ab_t / ab_prev;
    let alpha_eff = T::one() - beta_eff;
    let denom = T::one() - ab_t;
    let coef_z0 = ab_prev.sqrt() * beta_eff / denom;
    let coef_zt = alpha_eff.sqrt() * (T::one() - ab_prev) / denom;
    // sigma_t^2 = beta-tilde: untrained posterior variance
    let var = beta_eff * (T::one() - ab_prev) / denom;
    PosteriorCoefs {
        coef_z0,
        coef_zt,
        sigma: var.max(T::zero()).sqrt(),
    }
}
