//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is an eager tape: every operation computes its value at
//! construction time and records what it needs for the backward sweep.
//! [`Graph::backward`] walks the tape once in reverse and returns per-node
//! gradients. Losses are `1×1` tensors.
//!
//! The op set is exactly what the model needs; each backward rule is
//! verified against central differences in the test suite and again, per
//! parameter block, by the `gradcheck` module.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Attention geometry: `batch` sequences of `seq` positions, head-split
/// along the feature dim. `key_mask[flat_pos] = true` hides that position
/// from every query (padding). `causal` additionally hides keys after the
/// query position.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_mask: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// out[r] = src[ids[r]]
    GatherRows {
        src: NodeId,
        ids: Vec<usize>,
    },
    /// [m×k]·[k×n]
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// x + row-broadcast bias (bias is 1×d)
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// a + c·b
    AddScaled {
        a: NodeId,
        b: NodeId,
        c: T,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    /// Per-row normalization with learned gain/shift (gamma, beta are 1×d).
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: NodeId,
    },
    /// Elementwise product with a constant mask (dropout, position gates).
    MulMask {
        x: NodeId,
        mask: Tensor<T>,
    },
    /// Scaled dot-product attention over already-projected q/k/v.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttnSpec,
        probs: Vec<T>,
    },
    /// Per-row inner product of two [m×d] tensors -> [m×1].
    RowsDot {
        a: NodeId,
        b: NodeId,
    },
    /// Mean over rows of softplus(-pos) + softplus(neg): the paired
    /// binary-cross-entropy used by the recommendation loss.
    PairBce {
        pos: NodeId,
        neg: NodeId,
    },
    /// z·Mᵀ against rows 1.. of the item table (row 0 = padding, excluded).
    TiedLogits {
        z: NodeId,
        table: NodeId,
    },
    /// Per-row cross entropy -> [m×1]; `targets` are column indices.
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    /// Elementwise weighted sum -> scalar.
    WeightedSum {
        x: NodeId,
        w: Tensor<T>,
    },
    /// Σ_r w[r]·‖a_r − b_r‖² -> scalar.
    MaskedSqDiff {
        a: NodeId,
        b: NodeId,
        w: Vec<T>,
    },
    /// y_r = scale[r]·x_r + shift_r with constant scale/shift; the shift
    /// is baked into the forward value so only the scale is kept.
    RowAffine {
        x: NodeId,
        scale: Vec<T>,
    },
    /// Symmetric in-batch InfoNCE over paired rows of h1/h2 -> scalar.
    InfoNce {
        h1: NodeId,
        h2: NodeId,
        temp: T,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of the given shape when the loss did not
    /// depend on it.
    pub fn take_or_zeros(&mut self, id: NodeId, rows: usize, cols: usize) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a tape node. Parameters and constants are both
    /// leaves; only the ids the caller registered as parameters have their
    /// gradients read out.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: Vec<usize>) -> NodeId {
        let s = self.value(src);
        let cols = s.cols();
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(out, Op::GatherRows { src, ids })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul { a, b })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be 1×d");
        assert_eq!(bv.cols(), xv.cols(), "bias width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "add shape mismatch");
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(out, Op::Add { a, b })
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: T) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "add_scaled shape mismatch");
        let mut out = av.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(bv.data()) {
            *o += c * x;
        }
        self.push(out, Op::AddScaled { a, b, c })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale_assign(c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (m, d) = (xv.rows(), xv.cols());
        assert_eq!(gv.cols(), d);
        assert_eq!(bv.cols(), d);
        let eps = T::from_f64_c(LN_EPS);
        let dn = T::from_usize_c(d);
        let mut xhat = Tensor::zeros(m, d);
        let mut inv_std = vec![T::zero(); m];
        let mut out = Tensor::zeros(m, d);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / dn;
            let istd = (var + eps).sqrt().recip();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat.set(r, c, h);
                out.set(r, c, gv.get(0, c) * h + bv.get(0, c));
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        for v in out.data_mut().iter_mut() {
            *v = gelu_fwd(*v);
        }
        self.push(out, Op::Gelu { x })
    }

    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor<T>) -> NodeId {
        let xv = self.value(x);
        assert!(xv.same_shape(&mask), "mask shape mismatch");
        let mut out = xv.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        self.push(out, Op::MulMask { x, mask })
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttnSpec) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        let (nb, n, h) = (spec.batch, spec.seq, spec.heads);
        assert_eq!(qv.rows(), nb * n, "attention rows mismatch");
        assert!(qv.same_shape(kv) && qv.same_shape(vv));
        assert_eq!(d % h, 0, "feature dim not divisible by heads");
        assert_eq!(spec.key_mask.len(), nb * n);
        let dh = d / h;
        let scale = T::from_usize_c(dh).sqrt().recip();

        let mut probs = vec![T::zero(); nb * h * n * n];
        let mut out = Tensor::zeros(nb * n, d);
        let mut logits = vec![T::zero(); n];
        for b in 0..nb {
            for a in 0..h {
                let off = a * dh;
                for i in 0..n {
                    let qrow = &qv.row(b * n + i)[off..off + dh];
                    let mut any = false;
                    let mut max = T::neg_infinity();
                    for j in 0..n {
                        let allowed = !spec.key_mask[b * n + j] && (!spec.causal || j <= i);
                        if allowed {
                            let krow = &kv.row(b * n + j)[off..off + dh];
                            let mut s = T::zero();
                            for (&x, &y) in qrow.iter().zip(krow) {
                                s += x * y;
                            }
                            s = s * scale;
                            logits[j] = s;
                            if s > max {
                                max = s;
                            }
                            any = true;
                        } else {
                            logits[j] = T::neg_infinity();
                        }
                    }
                    // Fully masked query rows (e.g. causal queries sitting on
                    // padding) produce zero output and zero gradient.
                    if !any {
                        continue;
                    }
                    let mut z = T::zero();
                    let prow = &mut probs[((b * h + a) * n + i) * n..((b * h + a) * n + i + 1) * n];
                    for j in 0..n {
                        if logits[j].is_finite() {
                            let e = (logits[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        } else {
                            prow[j] = T::zero();
                        }
                    }
                    let orow = &mut out.row_mut(b * n + i)[off..off + dh];
                    for j in 0..n {
                        prow[j] = prow[j] / z;
                        if prow[j] != T::zero() {
                            let vrow = &vv.row(b * n + j)[off..off + dh];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += prow[j] * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, spec, probs })
    }

    pub fn rows_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "rows_dot shape mismatch");
        let mut out = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let s = av
                .row(r)
                .iter()
                .zip(bv.row(r))
                .map(|(&x, &y)| x * y)
                .sum::<T>();
            out.set(r, 0, s);
        }
        self.push(out, Op::RowsDot { a, b })
    }

    pub fn pair_bce(&mut self, pos: NodeId, neg: NodeId) -> NodeId {
        let pv = self.value(pos);
        let nv = self.value(neg);
        assert_eq!(pv.cols(), 1);
        assert!(pv.same_shape(nv));
        let m = T::from_usize_c(pv.rows());
        let mut total = T::zero();
        for r in 0..pv.rows() {
            total += softplus(-pv.get(r, 0)) + softplus(nv.get(r, 0));
        }
        self.push(Tensor::scalar(total / m), Op::PairBce { pos, neg })
    }

    pub fn tied_logits(&mut self, z: NodeId, table: NodeId) -> NodeId {
        let zv = self.value(z);
        let tv = self.value(table);
        assert_eq!(zv.cols(), tv.cols(), "tied logits width mismatch");
        let vocab = tv.rows() - 1;
        let mut out = Tensor::zeros(zv.rows(), vocab);
        for r in 0..zv.rows() {
            let zr = zv.row(r);
            let orow = out.row_mut(r);
            for (j, o) in orow.iter_mut().enumerate() {
                let trow = tv.row(j + 1);
                let mut s = T::zero();
                for (&x, &y) in zr.iter().zip(trow) {
                    s += x * y;
                }
                *o = s;
            }
        }
        self.push(out, Op::TiedLogits { z, table })
    }

    pub fn softmax_ce(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut out = Tensor::zeros(lv.rows(), 1);
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs.set(r, c, e);
                z += e;
            }
            for c in 0..lv.cols() {
                probs.set(r, c, probs.get(r, c) / z);
            }
            let t = targets[r];
            out.set(r, 0, z.ln() + max - row[t]);
        }
        self.push(out, Op::SoftmaxCe { logits, targets, probs })
    }

    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor<T>) -> NodeId {
        let xv = self.value(x);
        assert!(xv.same_shape(&w), "weighted_sum shape mismatch");
        let s = xv
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w })
    }

    pub fn masked_sq_diff(&mut self, a: NodeId, b: NodeId, w: Vec<T>) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(av.same_shape(bv), "masked_sq_diff shape mismatch");
        assert_eq!(av.rows(), w.len());
        let mut total = T::zero();
        for r in 0..av.rows() {
            if w[r] == T::zero() {
                continue;
            }
            let mut s = T::zero();
            for (&x, &y) in av.row(r).iter().zip(bv.row(r)) {
                let dlt = x - y;
                s += dlt * dlt;
            }
            total += w[r] * s;
        }
        self.push(Tensor::scalar(total), Op::MaskedSqDiff { a, b, w })
    }

    pub fn row_affine(&mut self, x: NodeId, scale: Vec<T>, shift: Tensor<T>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.rows(), scale.len());
        assert!(xv.same_shape(&shift), "row_affine shift shape mismatch");
        let mut out = shift.clone();
        for r in 0..xv.rows() {
            let xr = xv.row(r);
            let orow = out.row_mut(r);
            for (o, &v) in orow.iter_mut().zip(xr) {
                *o += scale[r] * v;
            }
        }
        self.push(out, Op::RowAffine { x, scale })
    }

    /// Symmetric in-batch InfoNCE: row i of `h1` and row i of `h2` are the
    /// two views of the same user; every other row of either view in the
    /// batch is a negative. Similarity is the raw inner product divided by
    /// `temperature` (1.0 = none). Mean over the 2N anchors.
    pub fn info_nce(&mut self, h1: NodeId, h2: NodeId, temperature: T) -> NodeId {
        let a = self.value(h1);
        let b = self.value(h2);
        assert!(a.same_shape(b), "info_nce shape mismatch");
        let n = a.rows();
        let d = a.cols();
        let two_n = 2 * n;
        // stacked views: rows 0..n from h1, n..2n from h2
        let mut all = Tensor::zeros(two_n, d);
        for r in 0..n {
            all.row_mut(r).copy_from_slice(a.row(r));
            all.row_mut(n + r).copy_from_slice(b.row(r));
        }
        let sims = all.matmul_nt(&all);
        let mut probs = Tensor::zeros(two_n, two_n);
        let mut loss = T::zero();
        for i in 0..two_n {
            let pos = (i + n) % two_n;
            let mut max = T::neg_infinity();
            for j in 0..two_n {
                if j != i {
                    let s = sims.get(i, j) / temperature;
                    if s > max {
                        max = s;
                    }
                }
            }
            let mut z = T::zero();
            for j in 0..two_n {
                if j != i {
                    let e = ((sims.get(i, j) / temperature) - max).exp();
                    probs.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..two_n {
                probs.set(i, j, probs.get(i, j) / z);
            }
            loss += z.ln() + max - sims.get(i, pos) / temperature;
        }
        loss = loss / T::from_usize_c(two_n);
        self.push(
            Tensor::scalar(loss),
            Op::InfoNce {
                h1,
                h2,
                temp: temperature,
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar loss node.
    ///
    /// Tape order guarantees every op's inputs precede it, so the sweep
    /// splits the gradient buffer at the current node: the node's own
    /// gradient is read from the upper half while input gradients
    /// accumulate in the lower half.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let gref = upper[0].as_ref().unwrap();
            let grads = lower;
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::GatherRows { src, ids } => {
                    let cols = gref.cols();
                    let rows = self.value(*src).rows();
                    let acc = ensure(grads, *src, rows, cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &x) in acc.row_mut(i).iter_mut().zip(gref.row(r)) {
                            *o += x;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = gref.matmul_nt(self.value(b));
                    let db = self.value(a).matmul_tn(&gref);
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
                Op::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let mut db = Tensor::zeros(1, gref.cols());
                    for r in 0..gref.rows() {
                        for (o, &v) in db.row_mut(0).iter_mut().zip(gref.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, x, gref.clone());
                    accumulate(grads, bias, db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(grads, a, gref.clone());
                    accumulate(grads, b, gref.clone());
                }
                Op::AddScaled { a, b, c } => {
                    let (a, b, c) = (*a, *b, *c);
                    let mut db = gref.clone();
                    db.scale_assign(c);
                    accumulate(grads, a, gref.clone());
                    accumulate(grads, b, db);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let mut dx = gref.clone();
                    dx.scale_assign(c);
                    accumulate(grads, x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let gv = self.value(gamma);
                    let (m, d) = (gref.rows(), gref.cols());
                    let dn = T::from_usize_c(d);
                    let mut dx = Tensor::zeros(m, d);
                    let mut dgamma = Tensor::zeros(1, d);
                    let mut dbeta = Tensor::zeros(1, d);
                    for r in 0..m {
                        let grow = gref.row(r);
                        let hrow = xhat.row(r);
                        let mut sum_gg = T::zero();
                        let mut sum_ggh = T::zero();
                        for c in 0..d {
                            let gg = gv.get(0, c) * grow[c];
                            sum_gg += gg;
                            sum_ggh += gg * hrow[c];
                            dgamma.set(0, c, dgamma.get(0, c) + grow[c] * hrow[c]);
                            dbeta.set(0, c, dbeta.get(0, c) + grow[c]);
                        }
                        let mean_gg = sum_gg / dn;
                        let mean_ggh = sum_ggh / dn;
                        for c in 0..d {
                            let gg = gv.get(0, c) * grow[c];
                            dx.set(r, c, inv_std[r] * (gg - mean_gg - hrow[c] * mean_ggh));
                        }
                    }
                    accumulate(grads, x, dx);
                    accumulate(grads, gamma, dgamma);
                    accumulate(grads, beta, dbeta);
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let xv = self.value(x);
                    let mut dx = gref.clone();
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *g *= gelu_bwd(v);
                    }
                    accumulate(grads, x, dx);
                }
                Op::MulMask { x, mask } => {
                    let x = *x;
                    let mut dx = gref.clone();
                    for (g, &m) in dx.data_mut().iter_mut().zip(mask.data()) {
                        *g *= m;
                    }
                    accumulate(grads, x, dx);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let qv = self.value(q);
                    let kv = self.value(k);
                    let vv = self.value(v);
                    let d = qv.cols();
                    let (nb, n, h) = (spec.batch, spec.seq, spec.heads);
                    let dh = d / h;
                    let scale = T::from_usize_c(dh).sqrt().recip();
                    let mut dq = Tensor::zeros(nb * n, d);
                    let mut dk = Tensor::zeros(nb * n, d);
                    let mut dv = Tensor::zeros(nb * n, d);
                    let mut dp = vec![T::zero(); n];
                    for b in 0..nb {
                        for a in 0..h {
                            let off = a * dh;
                            for i in 0..n {
                                let prow =
                                    &probs[((b * h + a) * n + i) * n..((b * h + a) * n + i + 1) * n];
                                let go = &gref.row(b * n + i)[off..off + dh];
                                let mut dot_pp = T::zero();
                                for j in 0..n {
                                    if prow[j] == T::zero() {
                                        dp[j] = T::zero();
                                        continue;
                                    }
                                    let vrow = &vv.row(b * n + j)[off..off + dh];
                                    let mut s = T::zero();
                                    for (&g, &x) in go.iter().zip(vrow) {
                                        s += g * x;
                                    }
                                    dp[j] = s;
                                    dot_pp += prow[j] * s;
                                    // dV
                                    let dvrow = &mut dv.row_mut(b * n + j)[off..off + dh];
                                    for (o, &g) in dvrow.iter_mut().zip(go) {
                                        *o += prow[j] * g;
                                    }
                                }
                                let qrow_i = &qv.row(b * n + i)[off..off + dh];
                                for j in 0..n {
                                    if prow[j] == T::zero() {
                                        continue;
                                    }
                                    let ds = prow[j] * (dp[j] - dot_pp) * scale;
                                    let krow = &kv.row(b * n + j)[off..off + dh];
                                    let dqrow = &mut dq.row_mut(b * n + i)[off..off + dh];
                                    for (o, &x) in dqrow.iter_mut().zip(krow) {
                                        *o += ds * x;
                                    }
                                    let dkrow = &mut dk.row_mut(b * n + j)[off..off + dh];
                                    for (o, &x) in dkrow.iter_mut().zip(qrow_i.iter()) {
                                        *o += ds * x;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, q, dq);
                    accumulate(grads, k, dk);
                    accumulate(grads, v, dv);
                }
                Op::RowsDot { a, b } => {
                    let (a, b) = (*a, *b);
                    let mut da = self.value(b).clone();
                    let mut db = self.value(a).clone();
                    for r in 0..gref.rows() {
                        let g = gref.get(r, 0);
                        for x in da.row_mut(r) {
                            *x *= g;
                        }
                        for x in db.row_mut(r) {
                            *x *= g;
                        }
                    }
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
                Op::PairBce { pos, neg } => {
                    let (pos, neg) = (*pos, *neg);
                    let pv = self.value(pos);
                    let nv = self.value(neg);
                    let m = T::from_usize_c(pv.rows());
                    let g = gref.item() / m;
                    let mut dpos = Tensor::zeros(pv.rows(), 1);
                    let mut dneg = Tensor::zeros(pv.rows(), 1);
                    for r in 0..pv.rows() {
                        dpos.set(r, 0, (sigmoid(pv.get(r, 0)) - T::one()) * g);
                        dneg.set(r, 0, sigmoid(nv.get(r, 0)) * g);
                    }
                    accumulate(grads, pos, dpos);
                    accumulate(grads, neg, dneg);
                }
                Op::TiedLogits { z, table } => {
                    let (z, table) = (*z, *table);
                    let zv = self.value(z);
                    let tv = self.value(table);
                    let vocab = tv.rows() - 1;
                    let d = tv.cols();
                    let mut dz = Tensor::zeros(zv.rows(), d);
                    let mut dt = Tensor::zeros(tv.rows(), d);
                    for r in 0..zv.rows() {
                        let grow = gref.row(r);
                        let zrow = zv.row(r);
                        let dzrow = dz.row_mut(r);
                        for j in 0..vocab {
                            let g = grow[j];
                            if g == T::zero() {
                                continue;
                            }
                            let trow = tv.row(j + 1);
                            for (o, &x) in dzrow.iter_mut().zip(trow) {
                                *o += g * x;
                            }
                            let dtrow = dt.row_mut(j + 1);
                            for (o, &x) in dtrow.iter_mut().zip(zrow) {
                                *o += g * x;
                            }
                        }
                    }
                    accumulate(grads, z, dz);
                    accumulate(grads, table, dt);
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let logits = *logits;
                    let mut dl = probs.clone();
                    for r in 0..dl.rows() {
                        let g = gref.get(r, 0);
                        let t = targets[r];
                        let row = dl.row_mut(r);
                        row[t] -= T::one();
                        for x in row.iter_mut() {
                            *x *= g;
                        }
                    }
                    accumulate(grads, logits, dl);
                }
                Op::WeightedSum { x, w } => {
                    let x = *x;
                    let g = gref.item();
                    let mut dx = w.clone();
                    dx.scale_assign(g);
                    accumulate(grads, x, dx);
                }
                Op::MaskedSqDiff { a, b, w } => {
                    let (a, b) = (*a, *b);
                    let av = self.value(a);
                    let bv = self.value(b);
                    let g = gref.item();
                    let two = T::from_f64_c(2.0);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        if w[r] == T::zero() {
                            continue;
                        }
                        let c = two * w[r] * g;
                        let arow = av.row(r);
                        let brow = bv.row(r);
                        let drow = da.row_mut(r);
                        for i in 0..arow.len() {
                            drow[i] = c * (arow[i] - brow[i]);
                        }
                    }
                    let mut db = da.clone();
                    db.scale_assign(-T::one());
                    accumulate(grads, a, da);
                    accumulate(grads, b, db);
                }
                Op::RowAffine { x, scale } => {
                    let x = *x;
                    let mut dx = gref.clone();
                    for r in 0..dx.rows() {
                        let s = scale[r];
                        for v in dx.row_mut(r) {
                            *v *= s;
                        }
                    }
                    accumulate(grads, x, dx);
                }
                Op::InfoNce { h1, h2, temp, probs } => {
                    let (h1, h2) = (*h1, *h2);
                    let a = self.value(h1);
                    let b = self.value(h2);
                    let n = a.rows();
                    let d = a.cols();
                    let two_n = 2 * n;
                    let g = gref.item() * temp.recip() / T::from_usize_c(two_n);
                    let row_of = |i: usize| -> &[T] {
                        if i < n {
                            a.row(i)
                        } else {
                            b.row(i - n)
                        }
                    };
                    let mut dall = Tensor::zeros(two_n, d);
                    for i in 0..two_n {
                        let pos = (i + n) % two_n;
                        for j in 0..two_n {
                            if j == i {
                                continue;
                            }
                            let mut coef = probs.get(i, j);
                            if j == pos {
                                coef = coef - T::one();
                            }
                            if coef == T::zero() {
                                continue;
                            }
                            let c = coef * g;
                            // logit_ij = h_i · h_j: push into both rows
                            let ar = row_of(j).to_vec();
                            for (o, &x) in dall.row_mut(i).iter_mut().zip(ar.iter()) {
                                *o += c * x;
                            }
                            let br = row_of(i).to_vec();
                            for (o, &x) in dall.row_mut(j).iter_mut().zip(br.iter()) {
                                *o += c * x;
                            }
                        }
                    }
                    let mut d1 = Tensor::zeros(n, d);
                    let mut d2 = Tensor::zeros(n, d);
                    for r in 0..n {
                        d1.row_mut(r).copy_from_slice(dall.row(r));
                        d2.row_mut(r).copy_from_slice(dall.row(n + r));
                    }
                    accumulate(grads, h1, d1);
                    accumulate(grads, h2, d2);
                }
            }
        }
        Gradients { grads }
    }
}

fn ensure<'g, T: Scalar>(
    grads: &'g mut [Option<Tensor<T>>],
    id: NodeId,
    rows: usize,
    cols: usize,
) -> &'g mut Tensor<T> {
    if grads[id.0].is_none() {
        grads[id.0] = Some(Tensor::zeros(rows, cols));
    }
    grads[id.0].as_mut().unwrap()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable ln(1 + eˣ).
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64_c(GELU_C);
    let a = T::from_f64_c(GELU_A);
    let half = T::from_f64_c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::one() + t)
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64_c(GELU_C);
    let a = T::from_f64_c(GELU_A);
    let half = T::from_f64_c(0.5);
    let three = T::from_f64_c(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
