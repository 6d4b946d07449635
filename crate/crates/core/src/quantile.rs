//! Finite-sample order statistics.

use crate::error::{Error, Result};

// Absorbs representation error in products such as 0.9 * 20 so the
// ceiling lands on the intended rank.
const RANK_EPS: f64 = 1e-9;

/// Rank `k = ceil(level * (m + 1))` used by split-conformal calibration.
pub fn conformal_rank(m: usize, level: f64) -> usize {
    let k = (level * (m as f64 + 1.0) - RANK_EPS).ceil();
    k.max(1.0) as usize
}

/// The `k`-th smallest calibration score with `k = ceil(level * (m + 1))`,
/// or `+inf` when `k > m`.
pub fn empirical_quantile(scores: &[f64], level: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let k = conformal_rank(scores.len(), level);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    Ok(kth_smallest(scores, k))
}

/// `inf { s : F_m(s) >= level }` for the empirical CDF `F_m`, i.e. the
/// `ceil(level * m)`-th smallest value. Used by the online trackers, which
/// carry no finite-sample correction.
pub fn plain_quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let m = sorted.len();
    let k = ((level * m as f64 - RANK_EPS).ceil() as usize).clamp(1, m);
    sorted[k - 1]
}

/// `k`-th smallest (1-based) via selection.
pub fn kth_smallest(scores: &[f64], k: usize) -> f64 {
    assert!(k >= 1 && k <= scores.len());
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Scores kept in ascending order for repeated quantile lookups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SortedScores {
    sorted: Vec<f64>,
}

impl SortedScores {
    pub fn new(scores: &[f64]) -> Self {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    pub fn insert(&mut self, score: f64) {
        let pos = self.sorted.partition_point(|&s| s <= score);
        self.sorted.insert(pos, score);
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.sorted
    }

    pub fn plain_quantile(&self, level: f64) -> f64 {
        plain_quantile_sorted(&self.sorted, level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_formula_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.0);
        assert_eq!(empirical_quantile(&[0.2], 0.9).unwrap(), f64::INFINITY);
        assert_eq!(conformal_rank(19, 0.9), 18);
        assert_eq!(conformal_rank(9, 0.95), 10);
        assert_eq!(conformal_rank(500, 1.0 - 0.1 / 100.0), 501);
        assert_eq!(conformal_rank(500, 1.0 - 0.1 / 5.0), 491);
    }

    #[test]
    fn empty_scores_error() {
        assert!(matches!(
            empirical_quantile(&[], 0.5),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scores: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(empirical_quantile(&scores, 0.9).unwrap(), sorted[90]);
    }

    #[test]
    fn sorted_scores_insert_keeps_order() {
        let mut s = SortedScores::new(&[0.5, 0.1]);
        s.insert(0.3);
        s.insert(0.3);
        s.insert(0.0);
        assert_eq!(s.as_slice(), &[0.0, 0.1, 0.3, 0.3, 0.5]);
        assert_eq!(s.plain_quantile(0.9), 0.5);
        assert_eq!(s.plain_quantile(0.2), 0.0);
        assert_eq!(s.plain_quantile(0.6), 0.3);
    }

    // P(test <= Q) >= 1 - alpha for exchangeable scores.
    #[test]
    fn exchangeable_calibration_coverage() {
        let alpha = 0.1;
        for &m in &[19usize, 99] {
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let reps = 10_000;
            let mut hits = 0usize;
            for _ in 0..reps {
                let scores: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
                let q = empirical_quantile(&scores, 1.0 - alpha).unwrap();
                if rng.gen::<f64>() <= q {
                    hits += 1;
                }
            }
            let p = hits as f64 / reps as f64;
            let se = (0.9 * 0.1 / reps as f64).sqrt();
            assert!(p >= 1.0 - alpha - 3.0 * se, "m={m}: coverage {p}");
        }
    }

    proptest! {
        #[test]
        fn monotone_in_level(scores in prop::collection::vec(0.0f64..10.0, 1..40),
                             a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(empirical_quantile(&scores, lo).unwrap()
                <= empirical_quantile(&scores, hi).unwrap());
        }

        #[test]
        fn monotone_in_scores(scores in prop::collection::vec(0.0f64..10.0, 1..40),
                              idx in 0usize..40, bump in 0.0f64..5.0, level in 0.01f64..0.99) {
            let i = idx % scores.len();
            let mut raised = scores.clone();
            raised[i] += bump;
            prop_assert!(empirical_quantile(&scores, level).unwrap()
                <= empirical_quantile(&raised, level).unwrap());
        }
    }
}
