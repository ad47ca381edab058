//! In-batch InfoNCE over paired view representations.
//!
//! Row i of `h1` and row i of `h2` encode two views of the same user; all
//! 2(N-1) other-view rows in the batch are negatives. Similarity is the raw
//! inner product (no normalization; temperature defaults to 1 and exists
//! only as a config extension). Anchoring is symmetric and the loss is the
//! mean over the 2N anchors.

use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tape node for the contrastive loss; gradients flow into both view
/// encodings.
pub fn cl_loss_graph<T: Scalar>(g: &mut Graph<T>, h1: NodeId, h2: NodeId, temperature: T) -> NodeId {
    g.info_nce(h1, h2, temperature)
}

/// Value-only convenience form.
pub fn cl_loss<T: Scalar>(h1: &Tensor<T>, h2: &Tensor<T>, temperature: T) -> T {
    let mut g = Graph::new();
    let a = g.leaf(h1.clone());
    let b = g.leaf(h2.clone());
    let l = cl_loss_graph(&mut g, a, b, temperature);
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_batch_is_exactly_zero() {
        let h1 = Tensor::from_vec(1, 2, vec![0.3, -1.0]);
        let h2 = Tensor::from_vec(1, 2, vec![1.5, 0.2]);
        assert_eq!(cl_loss(&h1, &h2, 1.0), 0.0);
    }

    #[test]
    fn matches_hand_computed_infonce_for_two_users() {
        // N=2, d=2, hand-filled vectors. Anchors: a1,a2 (view1), b1,b2
        // (view2). For anchor a1: positive b1, negatives a2, b2; etc.
        let a1 = [1.0f64, 0.0];
        let a2 = [0.0f64, 1.0];
        let b1 = [0.5f64, 0.5];
        let b2 = [-0.5f64, 1.0];
        let dot = |x: &[f64; 2], y: &[f64; 2]| x[0] * y[0] + x[1] * y[1];

        // independent hand computation, one softmax per anchor
        let term = |pos: f64, negs: [f64; 2]| {
            let z = pos.exp() + negs[0].exp() + negs[1].exp();
            -(pos.exp() / z).ln()
        };
        let l_a1 = term(dot(&a1, &b1), [dot(&a1, &a2), dot(&a1, &b2)]);
        let l_a2 = term(dot(&a2, &b2), [dot(&a2, &a1), dot(&a2, &b1)]);
        let l_b1 = term(dot(&b1, &a1), [dot(&b1, &b2), dot(&b1, &a2)]);
        let l_b2 = term(dot(&b2, &a2), [dot(&b2, &b1), dot(&b2, &a1)]);
        let expected = (l_a1 + l_a2 + l_b1 + l_b2) / 4.0;

        let h1 = Tensor::from_vec(2, 2, vec![a1[0], a1[1], a2[0], a2[1]]);
        let h2 = Tensor::from_vec(2, 2, vec![b1[0], b1[1], b2[0], b2[1]]);
        let got = cl_loss(&h1, &h2, 1.0);
        assert!(
            (got - expected).abs() < 1e-6,
            "got {got}, hand-computed {expected}"
        );
    }

    #[test]
    fn similarity_shift_invariance() {
        // adding a constant to every inner product leaves the loss fixed;
        // appending a shared coordinate of value sqrt(c) to every row does
        // exactly that
        let mut s = crate::rng::SeedStream::new(5);
        let h1 = Tensor::<f64>::randn(3, 4, 1.0, &mut s);
        let h2 = Tensor::<f64>::randn(3, 4, 1.0, &mut s);
        let base = cl_loss(&h1, &h2, 1.0);
        let c: f64 = 2.5;
        let widen = |t: &Tensor<f64>| {
            let mut out = Tensor::zeros(t.rows(), 5);
            for r in 0..t.rows() {
                out.row_mut(r)[..4].copy_from_slice(t.row(r));
                out.set(r, 4, c.sqrt());
            }
            out
        };
        let shifted = cl_loss(&widen(&h1), &widen(&h2), 1.0);
        assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn raising_positive_similarity_lowers_loss() {
        // user 1 lives in coordinate 0, user 2 in coordinates 1..3, so
        // scaling a1 moves only the (a1, b1) positive similarity while every
        // negative similarity stays fixed
        let h2 = Tensor::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let a = 0.2 * k as f64;
            let h1 = Tensor::from_vec(2, 3, vec![a, 0.0, 0.0, 0.0, 1.0, 0.0]);
            let l = cl_loss(&h1, &h2, 1.0);
            assert!(l < prev, "loss must fall as the positive logit rises");
            prev = l;
        }
    }
}
