//! Counting metrics (MAE and root-mean-squared count error) and
//! localization metrics (precision/recall/F1 at a pixel distance
//! threshold).
//!
//! Localization matches predictions to annotations with the Hungarian
//! solver on Euclidean distances, with distances above the threshold
//! replaced by a large sentinel so the matcher prefers feasible pairs; the
//! threshold is then applied to the matched pairs. This makes the true
//! positive count equal to the maximum-cardinality feasible matching.

use ndarray::Array2;
use serde::Serialize;

use crate::decoder::PredPoint;
use crate::error::{Error, Result};
use crate::matching::{hungarian_any, CostMatrix};

/// Sentinel distance for pairs beyond the threshold; far larger than any
/// feasible total yet still finite for the solver.
const INFEASIBLE: f64 = 1e9;

/// Counting accuracy over a scene set. `rmse` is the square root of the
/// mean squared count error — the value crowd-counting tables label "MSE".
#[derive(Clone, Debug, Serialize)]
pub struct CountResult {
    pub mae: f64,
    pub rmse: f64,
    pub per_scene: Vec<(usize, usize)>,
}

/// `scenes` holds `(ground-truth count, predicted count)` per scene.
pub fn counting_metrics(scenes: &[(usize, usize)]) -> Result<CountResult> {
    if scenes.is_empty() {
        return Err(Error::invalid("counting metrics need at least one scene"));
    }
    // Integer accumulation: exactly permutation-invariant.
    let mut abs_sum: u64 = 0;
    let mut sq_sum: u64 = 0;
    for &(gt, pred) in scenes {
        let d = gt.abs_diff(pred) as u64;
        abs_sum += d;
        sq_sum += d * d;
    }
    let n = scenes.len() as f64;
    Ok(CountResult {
        mae: abs_sum as f64 / n,
        rmse: (sq_sum as f64 / n).sqrt(),
        per_scene: scenes.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LocalizationResult {
    /// Percent.
    pub precision: f64,
    /// Percent.
    pub recall: f64,
    /// Percent.
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Running TP/FP/FN totals for micro-averaging across scenes.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalizationTally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl LocalizationTally {
    pub fn add(&mut self, other: &LocalizationResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn finalize(&self) -> LocalizationResult {
        rates(self.tp, self.fp, self.fn_)
    }
}

fn rates(tp: usize, fp: usize, fn_: usize) -> LocalizationResult {
    if tp == 0 && fp == 0 && fn_ == 0 {
        // Empty prediction set against an empty annotation set is perfect.
        return LocalizationResult {
            precision: 100.0,
            recall: 100.0,
            f1: 100.0,
            tp,
            fp,
            fn_,
        };
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    LocalizationResult {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    }
}

/// Single-scene localization at distance threshold `delta` (pixels).
pub fn localization_metrics(
    pred: &[PredPoint],
    gt: &[(f64, f64)],
    delta: f64,
) -> Result<LocalizationResult> {
    if delta <= 0.0 {
        return Err(Error::invalid("distance threshold must be positive"));
    }
    if pred.is_empty() || gt.is_empty() {
        return Ok(rates(0, pred.len(), gt.len()));
    }
    let mut costs = Array2::<f64>::zeros((pred.len(), gt.len()));
    for (p, pp) in pred.iter().enumerate() {
        for (g, gg) in gt.iter().enumerate() {
            let d = ((pp.x - gg.0).powi(2) + (pp.y - gg.1).powi(2)).sqrt();
            costs[(p, g)] = if d <= delta { d } else { INFEASIBLE };
        }
    }
    // Every optimal assignment attains the same feasible-pair count, so the
    // solver's tie-break policy is irrelevant here; sentinel-heavy matrices
    // carry huge tie groups that make canonicalization needless work.
    let assignment = hungarian_any(&CostMatrix::new(costs)?)?;
    let mut tp = 0usize;
    for &(p, g) in &assignment.pairs {
        let d = ((pred[p].x - gt[g].0).powi(2) + (pred[p].y - gt[g].1).powi(2)).sqrt();
        if d <= delta {
            tp += 1;
        }
    }
    Ok(rates(tp, pred.len() - tp, gt.len() - tp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64) -> PredPoint {
        PredPoint { x, y, score: 1.0 }
    }

    #[test]
    fn counting_examples() {
        let r = counting_metrics(&[(5, 5), (9, 9)]).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);

        let r = counting_metrics(&[(10, 12), (20, 18)]).unwrap();
        assert_eq!(r.mae, 2.0);
        assert_eq!(r.rmse, 2.0);

        let r = counting_metrics(&[(0, 0), (0, 0), (3, 0)]).unwrap();
        assert_eq!(r.mae, 1.0);
        assert!((r.rmse - 3.0f64.sqrt()).abs() < 1e-15);

        assert!(counting_metrics(&[]).is_err());
    }

    #[test]
    fn counting_permutation_invariant_exactly() {
        let scenes = vec![(3, 7), (100, 90), (0, 2), (55, 55), (8, 1)];
        let a = counting_metrics(&scenes).unwrap();
        let mut rev = scenes.clone();
        rev.reverse();
        let b = counting_metrics(&rev).unwrap();
        assert_eq!(a.mae, b.mae);
        assert_eq!(a.rmse, b.rmse);
    }

    #[test]
    fn rmse_bounds_mean_signed_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let scenes: Vec<(usize, usize)> = (0..rng.random_range(1..10))
                .map(|_| (rng.random_range(0..50), rng.random_range(0..50)))
                .collect();
            let r = counting_metrics(&scenes).unwrap();
            let signed: f64 = scenes
                .iter()
                .map(|&(g, p)| p as f64 - g as f64)
                .sum::<f64>()
                / scenes.len() as f64;
            assert!(r.rmse >= 0.0);
            assert!(r.rmse + 1e-12 >= signed.abs());
        }
    }

    #[test]
    fn localization_perfect_prediction() {
        let gt = vec![(3.0, 4.0), (10.0, 2.0), (7.5, 7.5)];
        let pred: Vec<PredPoint> = gt.iter().map(|&(x, y)| pt(x, y)).collect();
        let r = localization_metrics(&pred, &gt, 4.0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
    }

    #[test]
    fn localization_symmetric_perfection_for_any_point_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let n = rng.random_range(0..12);
            let mut gt: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)))
                .collect();
            if n > 1 {
                // Duplicate points must not break perfection.
                gt[0] = gt[1];
            }
            let pred: Vec<PredPoint> = gt.iter().map(|&(x, y)| pt(x, y)).collect();
            let r = localization_metrics(&pred, &gt, 4.0).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
        }
    }

    #[test]
    fn localization_one_gt_two_preds() {
        let gt = vec![(5.0, 5.0)];
        let pred = vec![pt(6.0, 5.0), pt(50.0, 50.0)];
        let r = localization_metrics(&pred, &gt, 4.0).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert_eq!(r.precision, 50.0);
        assert_eq!(r.recall, 100.0);
        assert!((r.f1 - 2.0 * 50.0 * 100.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn localization_empty_cases() {
        let r = localization_metrics(&[], &[], 4.0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));

        let r = localization_metrics(&[], &[(1.0, 1.0)], 4.0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.fn_, 1);

        let r = localization_metrics(&[pt(1.0, 1.0)], &[], 4.0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.fp, 1);

        assert!(localization_metrics(&[], &[], 0.0).is_err());
    }

    /// Maximum number of prediction-gt pairs with distance <= delta, by
    /// exhaustive search.
    fn brute_max_feasible(pred: &[PredPoint], gt: &[(f64, f64)], delta: f64) -> usize {
        fn rec(feasible: &Vec<Vec<bool>>, p: usize, used: &mut Vec<bool>) -> usize {
            if p == feasible.len() {
                return 0;
            }
            let mut best = rec(feasible, p + 1, used);
            for g in 0..used.len() {
                if feasible[p][g] && !used[g] {
                    used[g] = true;
                    best = best.max(1 + rec(feasible, p + 1, used));
                    used[g] = false;
                }
            }
            best
        }
        let feasible: Vec<Vec<bool>> = pred
            .iter()
            .map(|pp| {
                gt.iter()
                    .map(|gg| ((pp.x - gg.0).powi(2) + (pp.y - gg.1).powi(2)).sqrt() <= delta)
                    .collect()
            })
            .collect();
        let mut used = vec![false; gt.len()];
        rec(&feasible, 0, &mut used)
    }

    #[test]
    fn localization_tp_equals_max_feasible_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let delta = 4.0;
        for _ in 0..50 {
            let m = rng.random_range(0..=6);
            let n = rng.random_range(0..=6);
            // Cluster points in a small box so delta-overlaps are common.
            let pred: Vec<PredPoint> = (0..m)
                .map(|_| pt(rng.random_range(0.0..16.0), rng.random_range(0.0..16.0)))
                .collect();
            let gt: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(0.0..16.0), rng.random_range(0.0..16.0)))
                .collect();
            let want = brute_max_feasible(&pred, &gt, delta);
            let r = localization_metrics(&pred, &gt, delta).unwrap();
            assert_eq!(
                r.tp, want,
                "matcher TP {} != brute-force max feasible {want} (m={m}, n={n})",
                r.tp
            );
        }
    }

    #[test]
    fn localization_tp_monotone_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let pred: Vec<PredPoint> = (0..5)
            .map(|_| pt(rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)))
            .collect();
        let gt: Vec<(f64, f64)> = (0..5)
            .map(|_| (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)))
            .collect();
        let mut last = 0usize;
        for delta in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let r = localization_metrics(&pred, &gt, delta).unwrap();
            assert!(r.tp >= last, "TP decreased as delta grew");
            last = r.tp;
        }
    }

    #[test]
    fn tally_micro_averages() {
        let mut tally = LocalizationTally::default();
        tally.add(&rates(1, 1, 0));
        tally.add(&rates(0, 0, 2));
        let r = tally.finalize();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 2));
        assert_eq!(r.precision, 50.0);
        assert!((r.recall - 100.0 / 3.0).abs() < 1e-12);
    }
}
