//! Ranking quality and exposure fairness: nDCG@k (overall and per
//! popularity side), Item Coverage with a minimum-appearance rule, and the
//! Gini index over exposure counts.

use crate::data::{PopularityPartition, Side};
use crate::error::{Error, Result};

/// Top-k lists for a set of users plus each user's held-out target.
#[derive(Debug, Clone)]
pub struct RecommendationBatch {
    /// Per-user ranked lists, best first; each list has at most `k` items.
    pub lists: Vec<Vec<u32>>,
    /// Held-out test item per user, aligned with `lists`.
    pub targets: Vec<u32>,
    pub k: usize,
}

impl RecommendationBatch {
    pub fn n_users(&self) -> usize {
        self.lists.len()
    }

    /// How many times each catalog item appears across all lists.
    pub fn exposure_counts(&self, n_items: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n_items];
        for list in &self.lists {
            for &i in list {
                counts[i as usize] += 1;
            }
        }
        counts
    }
}

/// Single-relevant-item nDCG: `1/log2(rank+1)` if the target sits at
/// 1-based `rank ≤ k`, else 0.
pub fn ndcg_at_k(list: &[u32], target: u32, k: usize) -> f64 {
    for (pos, &item) in list.iter().take(k).enumerate() {
        if item == target {
            return 1.0 / ((pos + 2) as f64).log2();
        }
    }
    0.0
}

/// Mean per-user nDCG over the batch.
pub fn batch_ndcg(batch: &RecommendationBatch) -> f64 {
    if batch.lists.is_empty() {
        return 0.0;
    }
    let sum: f64 = batch
        .lists
        .iter()
        .zip(&batch.targets)
        .map(|(list, &t)| ndcg_at_k(list, t, batch.k))
        .sum();
    sum / batch.lists.len() as f64
}

/// nDCG averaged over users whose test item is head (resp. tail). A side
/// with no users reports `None` rather than zero.
pub fn head_tail_ndcg(
    batch: &RecommendationBatch,
    partition: &PopularityPartition,
) -> (Option<f64>, Option<f64>) {
    let mut head = (0.0, 0usize);
    let mut tail = (0.0, 0usize);
    for (list, &t) in batch.lists.iter().zip(&batch.targets) {
        let v = ndcg_at_k(list, t, batch.k);
        match partition.side(t) {
            Side::Head => {
                head.0 += v;
                head.1 += 1;
            }
            Side::Tail => {
                tail.0 += v;
                tail.1 += 1;
            }
            Side::Mid => {}
        }
    }
    let avg = |(s, n): (f64, usize)| if n == 0 { None } else { Some(s / n as f64) };
    (avg(head), avg(tail))
}

/// Fraction of the catalog recommended at least `min_count` times across
/// all lists.
pub fn item_coverage(batch: &RecommendationBatch, n_items: usize, min_count: u64) -> f64 {
    let counts = batch.exposure_counts(n_items);
    let covered = counts.iter().filter(|&&c| c >= min_count).count();
    covered as f64 / n_items as f64
}

/// Gini index over exposure counts, zero-count items included.
///
/// Uses the sorted-counts form `Σ_i (2i − m − 1)·x_(i) / (m·Σx)` with
/// ascending `x` and 1-based `i`; 0 means perfectly uniform exposure.
pub fn gini(counts: &[u64]) -> Result<f64> {
    let m = counts.len();
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 || m == 0 {
        return Err(Error::ZeroExposure);
    }
    let mut sorted: Vec<u64> = counts.to_vec();
    sorted.sort_unstable();
    let mut num = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        num += (2.0 * (i + 1) as f64 - m as f64 - 1.0) * x as f64;
    }
    Ok(num / (m as f64 * total as f64))
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ndcg: f64,
    pub ndcg_head: Option<f64>,
    pub ndcg_tail: Option<f64>,
    pub item_coverage: f64,
    pub gini: f64,
}

impl MetricsReport {
    /// Computes all metrics for a batch over an `n_items` catalog.
    pub fn from_batch(
        batch: &RecommendationBatch,
        partition: &PopularityPartition,
        min_count: u64,
    ) -> Result<Self> {
        let n_items = partition.n_items();
        let (ndcg_head, ndcg_tail) = head_tail_ndcg(batch, partition);
        Ok(Self {
            ndcg: batch_ndcg(batch),
            ndcg_head,
            ndcg_tail,
            item_coverage: item_coverage(batch, n_items, min_count),
            gini: gini(&batch.exposure_counts(n_items))?,
        })
    }

    pub const CSV_HEADER: &'static str = "ndcg,ndcg_head,ndcg_tail,item_coverage,gini";

    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(crate::emit::sig6).unwrap_or_default();
        vec![
            crate::emit::sig6(self.ndcg),
            opt(self.ndcg_head),
            opt(self.ndcg_tail),
            crate::emit::sig6(self.item_coverage),
            crate::emit::sig6(self.gini),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{popularity_partition, SplitDataset, UserSplit};
    use rand::Rng;

    fn partition_from_counts(counts: &[u64], frac: f64) -> PopularityPartition {
        let mut train = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                train.push(i as u32);
            }
        }
        let split = SplitDataset {
            users: vec![UserSplit {
                user: 0,
                train,
                val: 0,
                test: 0,
            }],
            n_items: counts.len(),
            dropped_users: 0,
        };
        popularity_partition(&split, frac, frac).unwrap()
    }

    #[test]
    fn ndcg_closed_forms() {
        let list = vec![5, 9, 2, 7];
        assert_eq!(ndcg_at_k(&list, 5, 10), 1.0);
        assert!((ndcg_at_k(&list, 2, 10) - 0.5).abs() < 1e-12); // rank 3 → 1/log2(4)
        assert_eq!(ndcg_at_k(&list, 100, 10), 0.0);
        // beyond k doesn't count
        assert_eq!(ndcg_at_k(&list, 7, 3), 0.0);
    }

    #[test]
    fn ndcg_takes_values_from_the_closed_set() {
        let mut rng = crate::rng::rng_from_seed(3);
        let k = 10;
        for _ in 0..200 {
            let list: Vec<u32> = (0..k as u32).map(|_| rng.gen_range(0..30)).collect();
            let target = rng.gen_range(0..30);
            let v = ndcg_at_k(&list, target, k);
            let allowed: Vec<f64> = (1..=k)
                .map(|r| 1.0 / ((r + 1) as f64).log2())
                .chain(std::iter::once(0.0))
                .collect();
            assert!(
                allowed.iter().any(|a| (a - v).abs() < 1e-12),
                "value {v} not of closed form"
            );
        }
    }

    #[test]
    fn batch_ndcg_is_mean_of_per_user() {
        let batch = RecommendationBatch {
            lists: vec![vec![1, 2], vec![3, 4], vec![5, 6]],
            targets: vec![1, 4, 9],
            k: 10,
        };
        let expect =
            (1.0 + 1.0 / 3f64.log2() + 0.0) / 3.0;
        assert!((batch_ndcg(&batch) - expect).abs() < 1e-12);
    }

    #[test]
    fn head_tail_split_and_empty_subset() {
        // counts: item0 most popular (head), item3 least (tail)
        let partition = partition_from_counts(&[30, 10, 5, 1], 0.25);
        let batch = RecommendationBatch {
            lists: vec![vec![0, 1], vec![2, 3], vec![1, 0], vec![3, 2]],
            targets: vec![0, 3, 0, 3],
            k: 10,
        };
        let (h, t) = head_tail_ndcg(&batch, &partition);
        // users 0 and 2: head targets at ranks 1 and 2
        let h_expect = (1.0 + 1.0 / 3f64.log2()) / 2.0;
        // users 1 and 3: tail targets at ranks 2 and 1
        let t_expect = (1.0 / 3f64.log2() + 1.0) / 2.0;
        assert!((h.unwrap() - h_expect).abs() < 1e-12);
        assert!((t.unwrap() - t_expect).abs() < 1e-12);

        // all-head targets → tail absent, not zero
        let batch2 = RecommendationBatch {
            lists: vec![vec![0]],
            targets: vec![0],
            k: 10,
        };
        let (h2, t2) = head_tail_ndcg(&batch2, &partition);
        assert!(h2.is_some());
        assert!(t2.is_none());
    }

    #[test]
    fn coverage_counting() {
        // 5 users, identical 2-item lists → both items pass min_count=5
        let batch = RecommendationBatch {
            lists: vec![vec![3, 7]; 5],
            targets: vec![0; 5],
            k: 2,
        };
        assert!((item_coverage(&batch, 10, 5) - 0.2).abs() < 1e-12);

        // 4 users with disjoint lists → nothing reaches 5
        let batch = RecommendationBatch {
            lists: vec![vec![0], vec![1], vec![2], vec![3]],
            targets: vec![0; 4],
            k: 1,
        };
        assert_eq!(item_coverage(&batch, 10, 5), 0.0);
    }

    #[test]
    fn coverage_matches_naive_count_oracle() {
        let mut rng = crate::rng::rng_from_seed(17);
        let m = 40;
        let lists: Vec<Vec<u32>> = (0..60)
            .map(|_| (0..10).map(|_| rng.gen_range(0..m as u32)).collect())
            .collect();
        let batch = RecommendationBatch {
            lists: lists.clone(),
            targets: vec![0; 60],
            k: 10,
        };
        let mut naive = vec![0u64; m];
        for l in &lists {
            for &i in l {
                naive[i as usize] += 1;
            }
        }
        let covered = naive.iter().filter(|&&c| c >= 5).count() as f64 / m as f64;
        assert!((item_coverage(&batch, m, 5) - covered).abs() < 1e-12);
    }

    #[test]
    fn coverage_is_monotone_in_users() {
        let mut rng = crate::rng::rng_from_seed(5);
        let m = 25;
        let all_lists: Vec<Vec<u32>> = (0..50)
            .map(|_| (0..5).map(|_| rng.gen_range(0..m as u32)).collect())
            .collect();
        let mut prev = 0.0;
        for n in [10, 20, 30, 40, 50] {
            let batch = RecommendationBatch {
                lists: all_lists[..n].to_vec(),
                targets: vec![0; n],
                k: 5,
            };
            let c = item_coverage(&batch, m, 5);
            assert!(c >= prev - 1e-12);
            prev = c;
        }
    }

    /// O(m²) pairwise-difference Gini oracle.
    fn gini_pairwise(counts: &[u64]) -> f64 {
        let m = counts.len() as f64;
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let mut diff = 0.0;
        for &a in counts {
            for &b in counts {
                diff += (a as f64 - b as f64).abs();
            }
        }
        diff / (2.0 * m * total)
    }

    #[test]
    fn gini_closed_forms() {
        assert!((gini(&[7, 7, 7, 7]).unwrap() - 0.0).abs() < 1e-12);
        let m = 12;
        let mut counts = vec![0u64; m];
        counts[4] = 99;
        let expect = (m as f64 - 1.0) / m as f64;
        assert!((gini(&counts).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(gini(&[0, 0, 0]), Err(Error::ZeroExposure)));
    }

    #[test]
    fn gini_matches_pairwise_oracle() {
        let mut rng = crate::rng::rng_from_seed(23);
        for _ in 0..20 {
            let counts: Vec<u64> = (0..50).map(|_| rng.gen_range(0..100)).collect();
            if counts.iter().all(|&c| c == 0) {
                continue;
            }
            let fast = gini(&counts).unwrap();
            let slow = gini_pairwise(&counts);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn gini_scale_invariance() {
        let mut rng = crate::rng::rng_from_seed(31);
        let counts: Vec<u64> = (0..30).map(|_| rng.gen_range(0..50)).collect();
        let g1 = gini(&counts).unwrap();
        let scaled: Vec<u64> = counts.iter().map(|&c| c * 7).collect();
        let g2 = gini(&scaled).unwrap();
        assert!((g1 - g2).abs() < 1e-12);
    }

    #[test]
    fn gini_transfer_property() {
        // moving exposure from a low-count item to a high-count item
        // weakly increases concentration
        let mut rng = crate::rng::rng_from_seed(41);
        for _ in 0..50 {
            let mut counts: Vec<u64> = (0..20).map(|_| rng.gen_range(1..100)).collect();
            let g_before = gini(&counts).unwrap();
            let lo = (0..20).min_by_key(|&i| counts[i]).unwrap();
            let hi = (0..20).max_by_key(|&i| counts[i]).unwrap();
            if lo == hi || counts[lo] == 0 {
                continue;
            }
            counts[lo] -= 1;
            counts[hi] += 1;
            let g_after = gini(&counts).unwrap();
            assert!(g_after >= g_before - 1e-12);
        }
    }
}
