//! Voxel- and instance-level segmentation metrics plus binary
//! classification metrics.

pub mod stats;

use crate::error::{Error, Result};

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Input("confusion counts need aligned inputs".into()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct VoxelMetrics {
    pub dice: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Voxel-wise overlap metrics between two aligned binary masks.
/// Empty prediction and empty ground truth score 1.0 everywhere; an empty
/// side against a non-empty one scores 0.
pub fn voxel_metrics(pred: &[bool], gt: &[bool]) -> Result<VoxelMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Input("voxel metrics need aligned masks".into()));
    }
    let tp = pred.iter().zip(gt).filter(|&(&p, &g)| p && g).count() as f64;
    let p_total = pred.iter().filter(|&&p| p).count() as f64;
    let g_total = gt.iter().filter(|&&g| g).count() as f64;
    if p_total == 0.0 && g_total == 0.0 {
        return Ok(VoxelMetrics { dice: 1.0, recall: 1.0, precision: 1.0 });
    }
    let dice = if p_total + g_total > 0.0 { 2.0 * tp / (p_total + g_total) } else { 1.0 };
    let recall = if g_total > 0.0 { tp / g_total } else { 0.0 };
    let precision = if p_total > 0.0 { tp / p_total } else { 0.0 };
    Ok(VoxelMetrics { dice, recall, precision })
}

/// One-to-one instance matching result. Instances are referenced by their
/// position in the input lists.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (pred index, gt index, IoU), every IoU >= the threshold used.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

fn iou(a: &[usize], b: &[usize]) -> f64 {
    // inputs are sorted voxel index lists
    let mut i = 0;
    let mut j = 0;
    let mut inter = 0usize;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching in descending IoU order; ties broken by
/// (pred index, gt index). Pairs below `iou_thresh` never match.
pub fn match_instances(pred: &[Vec<usize>], gt: &[Vec<usize>], iou_thresh: f64) -> MatchResult {
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(p, g);
            if v >= iou_thresh {
                candidates.push((pi, gi, v));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(&b.0)).then_with(|| a.1.cmp(&b.1))
    });
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (pi, gi, v) in candidates {
        if !used_p[pi] && !used_g[gi] {
            used_p[pi] = true;
            used_g[gi] = true;
            pairs.push((pi, gi, v));
        }
    }
    MatchResult {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|&i| !used_p[i]).collect(),
        unmatched_gt: (0..gt.len()).filter(|&i| !used_g[i]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct InstanceMetrics {
    pub f_measure: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Detection metrics from a match result. Empty ground truth and empty
/// prediction both count as perfect on their respective denominators.
pub fn instance_metrics(m: &MatchResult) -> InstanceMetrics {
    let matches = m.pairs.len() as f64;
    let n_gt = (m.pairs.len() + m.unmatched_gt.len()) as f64;
    let n_pred = (m.pairs.len() + m.unmatched_pred.len()) as f64;
    let recall = if n_gt > 0.0 { matches / n_gt } else { 1.0 };
    let precision = if n_pred > 0.0 { matches / n_pred } else { 1.0 };
    let f_measure =
        if recall + precision > 0.0 { 2.0 * recall * precision / (recall + precision) } else { 0.0 };
    InstanceMetrics { f_measure, recall, precision }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Threshold-based binary classification metrics. Predicted positive means
/// score >= threshold. Requires both classes present.
pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels must be aligned".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("classification metrics need both classes".into()));
    }
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let c = ConfusionCounts::from_predictions(&pred, labels)?;
    let sensitivity = c.tp as f64 / (c.tp + c.fn_) as f64;
    let specificity = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(ClassificationMetrics {
        accuracy: (c.tp + c.tn) as f64 / labels.len() as f64,
        balanced_accuracy: 0.5 * (sensitivity + specificity),
        sensitivity,
        specificity,
    })
}

/// Balanced accuracy straight from a sensitivity/specificity pair.
pub fn balanced_accuracy(sensitivity: f64, specificity: f64) -> f64 {
    0.5 * (sensitivity + specificity)
}

/// ROC curve with trapezoid-free rank AUC (ties get half credit).
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RocCurve {
    /// (fpr, tpr, threshold), fpr and tpr non-decreasing.
    pub points: Vec<(f64, f64, f64)>,
    pub auc: f64,
}

/// Midranks of a slice (average rank for ties), 1-based.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// AUC by the rank statistic plus the full threshold sweep.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Input("scores and labels must be aligned".into()));
    }
    let m = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - m;
    if m == 0 || n == 0 {
        return Err(Error::Degenerate("AUC needs at least one positive and one negative".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|&(_, &l)| l).map(|(r, _)| r).sum();
    let auc = (rank_sum - (m * (m + 1)) as f64 / 2.0) / (m as f64 * n as f64);

    // threshold sweep, descending score
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(0.0, 0.0, f64::INFINITY)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / m as f64, t));
    }
    Ok(RocCurve { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_masks_score_one() {
        let m = vec![true, false, true, true];
        let v = voxel_metrics(&m, &m).unwrap();
        assert_eq!((v.dice, v.recall, v.precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = vec![true, true, false, false];
        let b = vec![false, false, true, true];
        let v = voxel_metrics(&a, &b).unwrap();
        assert_eq!((v.dice, v.recall, v.precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_overlap_gives_dice_half() {
        // |A| = |B| = 2, intersection 1
        let a = vec![true, true, false, false];
        let b = vec![false, true, true, false];
        let v = voxel_metrics(&a, &b).unwrap();
        assert_eq!(v.dice, 0.5);
    }

    #[test]
    fn empty_empty_scores_one() {
        let a = vec![false; 5];
        let v = voxel_metrics(&a, &a).unwrap();
        assert_eq!((v.dice, v.recall, v.precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn dice_equals_voxel_f_measure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.3)).collect();
            let b: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.3)).collect();
            let v = voxel_metrics(&a, &b).unwrap();
            let f = if v.recall + v.precision > 0.0 {
                2.0 * v.recall * v.precision / (v.recall + v.precision)
            } else {
                0.0
            };
            if a.iter().any(|&x| x) || b.iter().any(|&x| x) {
                assert!((v.dice - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_identical_instance_matches_at_full_iou() {
        let inst = vec![vec![1usize, 2, 3]];
        let m = match_instances(&inst, &inst, 0.30);
        assert_eq!(m.pairs, vec![(0, 0, 1.0)]);
        assert!(m.unmatched_pred.is_empty() && m.unmatched_gt.is_empty());
    }

    #[test]
    fn iou_just_below_threshold_is_unmatched() {
        // IoU = 29/100 < 0.30
        let pred: Vec<usize> = (0..100).collect();
        let gt: Vec<usize> = (0..29).chain(100..171).collect();
        let m = match_instances(&[pred], &[gt], 0.30);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_pred, vec![0]);
        assert_eq!(m.unmatched_gt, vec![0]);
        // exactly at threshold it matches
        let pred2: Vec<usize> = (0..30).collect();
        let gt2: Vec<usize> = (0..30).collect();
        let m2 = match_instances(&[pred2], &[gt2], 0.30);
        assert_eq!(m2.pairs.len(), 1);
    }

    /// Exhaustive assignment oracle: max cardinality first, then max total
    /// IoU, over all one-to-one assignments above threshold.
    fn oracle_match(pred: &[Vec<usize>], gt: &[Vec<usize>], thresh: f64) -> (usize, f64) {
        fn recurse(
            pi: usize,
            pred: &[Vec<usize>],
            gt: &[Vec<usize>],
            used: &mut Vec<bool>,
            thresh: f64,
        ) -> (usize, f64) {
            if pi == pred.len() {
                return (0, 0.0);
            }
            // skip this pred
            let mut best = recurse(pi + 1, pred, gt, used, thresh);
            for gi in 0..gt.len() {
                if used[gi] {
                    continue;
                }
                let v = iou(&pred[pi], &gt[gi]);
                if v >= thresh {
                    used[gi] = true;
                    let (c, s) = recurse(pi + 1, pred, gt, used, thresh);
                    used[gi] = false;
                    if c + 1 > best.0 || (c + 1 == best.0 && s + v > best.1) {
                        best = (c + 1, s + v);
                    }
                }
            }
            best
        }
        recurse(0, pred, gt, &mut vec![false; gt.len()], thresh)
    }

    #[test]
    fn greedy_matches_exhaustive_oracle_on_small_blob_cases() {
        // jittered blobs on a line: overlaps stay local, so greedy attains
        // the optimum the oracle finds
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..60 {
            let n_pred = rng.gen_range(0..=3);
            let n_gt = rng.gen_range(0..=3);
            let blob = |rng: &mut ChaCha8Rng, slot: usize| -> Vec<usize> {
                let base = slot * 40 + rng.gen_range(0..12);
                let len = rng.gen_range(5..25);
                (base..base + len).collect()
            };
            let pred: Vec<Vec<usize>> = (0..n_pred).map(|i| blob(&mut rng, i)).collect();
            let gt: Vec<Vec<usize>> = (0..n_gt).map(|i| blob(&mut rng, i)).collect();
            let m = match_instances(&pred, &gt, 0.30);
            let (oc, os) = oracle_match(&pred, &gt, 0.30);
            let gs: f64 = m.pairs.iter().map(|p| p.2).sum();
            assert_eq!(m.pairs.len(), oc);
            assert!((gs - os).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_threshold_never_adds_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
                (0..rng.gen_range(1..4))
                    .map(|i| {
                        let base = i * 30 + rng.gen_range(0..10);
                        (base..base + rng.gen_range(4..20)).collect()
                    })
                    .collect()
            };
            let pred = mk(&mut rng);
            let gt = mk(&mut rng);
            let mut prev = usize::MAX;
            for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let c = match_instances(&pred, &gt, t).pairs.len();
                assert!(c <= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn instance_metric_arithmetic() {
        let m = MatchResult {
            pairs: vec![(0, 0, 0.5), (1, 1, 0.6)],
            unmatched_pred: vec![2, 3, 4, 5, 6, 7],
            unmatched_gt: vec![2, 3],
        };
        let im = instance_metrics(&m);
        assert_eq!(im.recall, 0.5);
        assert_eq!(im.precision, 0.25);
        assert!((im.f_measure - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_matched_scores_one() {
        let m = MatchResult { pairs: vec![(0, 0, 1.0)], unmatched_pred: vec![], unmatched_gt: vec![] };
        let im = instance_metrics(&m);
        assert_eq!((im.f_measure, im.recall, im.precision), (1.0, 1.0, 1.0));
    }

    #[test]
    fn balanced_accuracy_from_paired_rates() {
        let b = balanced_accuracy(0.588, 0.609);
        assert!((b - 0.599).abs() < 5e-4);
    }

    #[test]
    fn classification_metric_counts() {
        let scores = vec![0.9, 0.8, 0.4, 0.3, 0.6, 0.2];
        let labels = vec![true, true, true, false, false, false];
        let m = classification_metrics(&scores, &labels, 0.5).unwrap();
        assert!((m.sensitivity - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.specificity - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.balanced_accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_metrics_rejected() {
        assert!(classification_metrics(&[0.2, 0.4], &[true, true], 0.5).is_err());
        assert!(roc_auc(&[0.2, 0.4], &[false, false]).is_err());
    }

    #[test]
    fn perfectly_separated_scores_reach_auc_one() {
        let scores = vec![0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = vec![true, true, true, false, false];
        let roc = roc_auc(&scores, &labels).unwrap();
        assert_eq!(roc.auc, 1.0);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let n = rng.gen_range(5..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let roc = roc_auc(&scores, &labels).unwrap();
            let mut num = 0f64;
            let mut den = 0f64;
            for i in 0..n {
                if !labels[i] {
                    continue;
                }
                for j in 0..n {
                    if labels[j] {
                        continue;
                    }
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
            assert!((roc.auc - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let transformed: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
        let b = roc_auc(&transformed, &labels).unwrap().auc;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let roc = roc_auc(&scores, &labels).unwrap();
        for w in roc.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        assert!(roc.auc >= 0.0 && roc.auc <= 1.0);
    }
}
