//! Leave-one-out ranking metrics over the full catalog, per-length-group
//! breakdowns, a representation-dispersion statistic, and a paired t-test
//! helper for seed-level comparisons.

use std::collections::BTreeMap;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::SplitDataset;
use crate::embed::EmbeddingTables;
use crate::error::{CadirecError, Result};
use crate::scalar::Scalar;
use crate::sr_encoder::{encode_rows_eval, score_all, EncoderWeights};
use crate::tensor::Tensor;

/// 1-based rank of `target` within `scores` (score index j = item id j+1).
/// Ties break by ascending item id; items in `exclude` are removed from the
/// candidate set (empty by default: the full-catalog protocol).
pub fn rank_target<T: Scalar>(scores: &[T], target: u32, exclude: &HashSet<u32>) -> Result<usize> {
    let vocab = scores.len() as u32;
    if target < 1 || target > vocab {
        return Err(CadirecError::IdOutOfRange {
            id: target as usize,
            max: vocab as usize,
        });
    }
    debug_assert!(!exclude.contains(&target), "target must not be excluded");
    let ts = scores[(target - 1) as usize];
    let mut rank = 1usize;
    for j in 1..=vocab {
        if j == target || exclude.contains(&j) {
            continue;
        }
        let s = scores[(j - 1) as usize];
        if s > ts || (s == ts && j < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Single-relevant-item NDCG: contribution 1/log₂(rank+1) below the cutoff,
/// IDCG = 1.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| {
            if r <= k {
                1.0 / ((r as f64) + 1.0).log2()
            } else {
                0.0
            }
        })
        .sum();
    sum / ranks.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Upper length bound of the bucket (inclusive); `None` = overflow bucket.
    pub upper: Option<usize>,
    pub n_users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
    pub per_group: Vec<GroupMetrics>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        MetricsReport {
            hr: ks.iter().map(|&k| (k, hr_at_k(ranks, k))).collect(),
            ndcg: ks.iter().map(|&k| (k, ndcg_at_k(ranks, k))).collect(),
            n_users: ranks.len(),
            per_group: Vec::new(),
        }
    }
}

/// Bucket users by training-sequence length at the given sorted inclusive
/// upper boundaries, plus one overflow bucket.
pub fn group_by_length(
    lengths: &[usize],
    ranks: &[usize],
    boundaries: &[usize],
    ks: &[usize],
) -> Vec<GroupMetrics> {
    assert_eq!(lengths.len(), ranks.len());
    assert!(boundaries.windows(2).all(|w| w[0] < w[1]), "boundaries must be sorted");
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); boundaries.len() + 1];
    for (&len, &rank) in lengths.iter().zip(ranks.iter()) {
        let b = boundaries
            .iter()
            .position(|&ub| len <= ub)
            .unwrap_or(boundaries.len());
        buckets[b].push(rank);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, ranks)| GroupMetrics {
            upper: boundaries.get(i).copied(),
            n_users: ranks.len(),
            hr: ks.iter().map(|&k| (k, hr_at_k(&ranks, k))).collect(),
            ndcg: ks.iter().map(|&k| (k, ndcg_at_k(&ranks, k))).collect(),
        })
        .collect()
}

/// Mean pairwise cosine distance (1 - cosine similarity) between rows.
/// Zero rows make the cosine undefined; such pairs are excluded and counted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionStat {
    pub mean_cosine_distance: Option<f64>,
    pub pairs_used: usize,
    pub pairs_excluded: usize,
}

pub fn dispersion<T: Scalar>(h: &Tensor<T>) -> DispersionStat {
    assert!(h.rows() >= 2, "dispersion needs at least two rows");
    let norms: Vec<f64> = (0..h.rows())
        .map(|r| {
            h.row(r)
                .iter()
                .map(|&v| v.to_f64_c().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for i in 0..h.rows() {
        for j in (i + 1)..h.rows() {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                excluded += 1;
                continue;
            }
            let dot: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j))
                .map(|(&a, &b)| a.to_f64_c() * b.to_f64_c())
                .sum();
            total += 1.0 - dot / (norms[i] * norms[j]);
            used += 1;
        }
    }
    if excluded > 0 {
        log::warn!("dispersion: excluded {excluded} pairs involving zero rows");
    }
    DispersionStat {
        mean_cosine_distance: (used > 0).then(|| total / used as f64),
        pairs_used: used,
        pairs_excluded: excluded,
    }
}

/// One-sided paired t-test for H1: mean(a - b) > 0. Returns (t, p).
pub fn paired_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    assert!(n >= 2, "paired t-test needs at least two pairs");
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        // all differences identical: direction alone decides
        return if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 1.0)
        };
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    (t, 1.0 - dist.cdf(t))
}

/// Which held-out interaction to rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalStage {
    Valid,
    Test,
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub ranks: Vec<usize>,
    /// Training-prefix length per evaluated user.
    pub lengths: Vec<usize>,
}

/// Full-catalog leave-one-out evaluation of a trained model on every split
/// user. Seen-item exclusion is off by default (full-set protocol).
pub fn evaluate_split<T: Scalar>(
    tables: &EmbeddingTables<T>,
    encoder: &EncoderWeights<T>,
    split: &SplitDataset,
    stage: EvalStage,
    ks: &[usize],
    exclude_seen: bool,
    length_boundaries: &[usize],
) -> Result<EvalOutcome> {
    let n = split.num_users();
    let inputs: Vec<Vec<u32>> = (0..n)
        .map(|u| match stage {
            EvalStage::Valid => split.valid_input(u),
            EvalStage::Test => split.test_input(u),
        })
        .collect();
    let targets: Vec<u32> = match stage {
        EvalStage::Valid => split.valid_target.clone(),
        EvalStage::Test => split.test_target.clone(),
    };
    let h_last = encode_rows_eval(tables, encoder, &inputs, split.max_len, 256);
    let scores = score_all(&h_last, tables);
    let mut ranks = Vec::with_capacity(n);
    for u in 0..n {
        let exclude: HashSet<u32> = if exclude_seen {
            inputs[u]
                .iter()
                .copied()
                .filter(|&it| it != targets[u])
                .collect()
        } else {
            HashSet::new()
        };
        ranks.push(rank_target(scores.row(u), targets[u], &exclude)?);
    }
    let lengths: Vec<usize> = split.train_inputs.iter().map(Vec::len).collect();
    let mut report = MetricsReport::from_ranks(&ranks, ks);
    if !length_boundaries.is_empty() {
        report.per_group = group_by_length(&lengths, &ranks, length_boundaries, ks);
    }
    Ok(EvalOutcome {
        report,
        ranks,
        lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn unique_max_is_rank_one() {
        let scores = vec![0.1, 0.9, 0.3];
        assert_eq!(rank_target(&scores, 2, &HashSet::new()).unwrap(), 1);
    }

    #[test]
    fn all_ties_break_by_ascending_id() {
        let scores = vec![0.5; 6];
        assert_eq!(rank_target(&scores, 1, &HashSet::new()).unwrap(), 1);
        assert_eq!(rank_target(&scores, 4, &HashSet::new()).unwrap(), 4);
        assert_eq!(rank_target(&scores, 6, &HashSet::new()).unwrap(), 6);
    }

    #[test]
    fn exclusion_shrinks_the_candidate_set() {
        let scores = vec![0.9, 0.8, 0.7, 0.6];
        let mut ex = HashSet::new();
        ex.insert(1u32);
        ex.insert(2u32);
        assert_eq!(rank_target(&scores, 4, &ex).unwrap(), 2);
    }

    #[test]
    fn rank_matches_brute_force_sort_oracle() {
        let mut s = SeedStream::new(17);
        for trial in 0..200 {
            let v = 5 + s.below(20);
            let scores: Vec<f64> = (0..v)
                .map(|_| {
                    // coarse grid forces plenty of ties
                    let u: f64 = Scalar::uniform01(s.rng());
                    (u * 4.0).floor()
                })
                .collect();
            let target = (s.below(v) + 1) as u32;
            // oracle: stable sort on (score desc, id asc), find position
            let mut order: Vec<u32> = (1..=v as u32).collect();
            order.sort_by(|&a, &b| {
                scores[(b - 1) as usize]
                    .partial_cmp(&scores[(a - 1) as usize])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let oracle = order.iter().position(|&x| x == target).unwrap() + 1;
            let got = rank_target(&scores, target, &HashSet::new()).unwrap();
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    #[test]
    fn metric_formula_values() {
        assert_eq!(ndcg_at_k(&[1], 10), 1.0);
        let n2 = ndcg_at_k(&[2], 10);
        assert!((n2 - 1.0 / 3.0f64.log2()).abs() < 1e-12);
        assert!((n2 - 0.6309).abs() < 1e-4);
        assert_eq!(hr_at_k(&[11], 10), 0.0);
        assert_eq!(ndcg_at_k(&[11], 10), 0.0);
        assert_eq!(hr_at_k(&[10], 10), 1.0);
    }

    #[test]
    fn metrics_monotone_in_k() {
        let mut s = SeedStream::new(23);
        let ranks: Vec<usize> = (0..50).map(|_| 1 + s.below(30)).collect();
        for k in 1..29 {
            assert!(hr_at_k(&ranks, k) <= hr_at_k(&ranks, k + 1) + 1e-15);
            assert!(ndcg_at_k(&ranks, k) <= ndcg_at_k(&ranks, k + 1) + 1e-15);
        }
    }

    #[test]
    fn single_bucket_equals_global_report() {
        let ranks = vec![1, 3, 12, 7, 2];
        let lengths = vec![4, 9, 2, 7, 5];
        let groups = group_by_length(&lengths, &ranks, &[100], &[5, 10]);
        assert_eq!(groups[0].n_users, 5);
        assert_eq!(groups[0].hr[&10], hr_at_k(&ranks, 10));
        assert_eq!(groups[0].ndcg[&5], ndcg_at_k(&ranks, 5));
        assert_eq!(groups[1].n_users, 0);
    }

    #[test]
    fn partition_identity_user_weighted_average() {
        let mut s = SeedStream::new(29);
        let n = 137;
        let ranks: Vec<usize> = (0..n).map(|_| 1 + s.below(40)).collect();
        let lengths: Vec<usize> = (0..n).map(|_| 3 + s.below(30)).collect();
        let ks = [5usize, 10];
        let groups = group_by_length(&lengths, &ranks, &[5, 12, 20], &ks);
        for &k in &ks {
            let weighted: f64 = groups
                .iter()
                .map(|gmet| gmet.hr[&k] * gmet.n_users as f64)
                .sum::<f64>()
                / n as f64;
            assert!((weighted - hr_at_k(&ranks, k)).abs() < 1e-12);
            let weighted_n: f64 = groups
                .iter()
                .map(|gmet| gmet.ndcg[&k] * gmet.n_users as f64)
                .sum::<f64>()
                / n as f64;
            assert!((weighted_n - ndcg_at_k(&ranks, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn dispersion_identical_rows_is_zero() {
        let h = Tensor::from_vec(3, 2, vec![0.5, 1.0, 0.5, 1.0, 0.5, 1.0]);
        let d = dispersion(&h);
        assert!(d.mean_cosine_distance.unwrap().abs() < 1e-12);
        assert_eq!(d.pairs_excluded, 0);
    }

    #[test]
    fn dispersion_orthogonal_rows_is_one() {
        let h = Tensor::from_vec(3, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.5]);
        let d = dispersion(&h);
        assert!((d.mean_cosine_distance.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dispersion_matches_hand_computation() {
        // rows: (1,0), (0,1), (1,1), (-1,0)
        let h = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0]);
        let r2 = std::f64::consts::SQRT_2;
        let pairs = [
            1.0,             // (1,0)·(0,1)
            1.0 - 1.0 / r2,  // (1,0)·(1,1)
            2.0,             // (1,0)·(-1,0)
            1.0 - 1.0 / r2,  // (0,1)·(1,1)
            1.0,             // (0,1)·(-1,0)
            1.0 + 1.0 / r2,  // (1,1)·(-1,0)
        ];
        let expected = pairs.iter().sum::<f64>() / 6.0;
        let d = dispersion(&h);
        assert!((d.mean_cosine_distance.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dispersion_excludes_zero_rows() {
        let h = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let d = dispersion(&h);
        assert_eq!(d.pairs_excluded, 2);
        assert_eq!(d.pairs_used, 1);
        assert!((d.mean_cosine_distance.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paired_t_test_detects_direction() {
        let a: Vec<f64> = (0..100).map(|i| 1.0 + (i % 7) as f64 * 0.01).collect();
        let b: Vec<f64> = (0..100).map(|i| 0.5 + (i % 5) as f64 * 0.01).collect();
        let (t, p) = paired_t_test(&a, &b);
        assert!(t > 0.0);
        assert!(p < 1e-6);
        let (t2, p2) = paired_t_test(&b, &a);
        assert!(t2 < 0.0);
        assert!(p2 > 0.999);
    }
}
