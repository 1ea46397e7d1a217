//! Patient-level metastasis aggregation from node instances: largest
//! positive-node volume, validation-split threshold selection, and
//! threshold application.

use crate::error::{Error, Result};
use crate::instance::{GtLabel, LNInstance};
use crate::metrics::balanced_accuracy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One patient with their node instances and ground-truth label.
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub instances: Vec<LNInstance>,
    pub gt_metastasis: bool,
    pub split: Split,
}

impl PatientRecord {
    /// Validates the label-consistency invariant when GT node labels are
    /// available: metastasis-positive iff at least one GT-positive node.
    pub fn new(patient_id: String, instances: Vec<LNInstance>, gt_metastasis: bool, split: Split) -> Result<Self> {
        let labeled = instances.iter().any(|i| i.gt_label != GtLabel::Unknown);
        if labeled {
            let any_pos = instances.iter().any(|i| i.gt_label == GtLabel::Positive);
            if any_pos != gt_metastasis {
                return Err(Error::Input(format!(
                    "{patient_id}: metastasis label {gt_metastasis} contradicts instance labels"
                )));
            }
        }
        Ok(PatientRecord { patient_id, instances, gt_metastasis, split })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeSource {
    Gt,
    Predicted,
}

/// Volume of the largest positive node in mm^3; zero when there is none.
pub fn max_pos_volume(record: &PatientRecord, source: VolumeSource) -> f64 {
    record
        .instances
        .iter()
        .filter(|i| match source {
            VolumeSource::Gt => i.gt_label == GtLabel::Positive,
            VolumeSource::Predicted => i.pred_label == Some(true),
        })
        .map(|i| i.volume_mm3)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ThresholdSelection {
    pub tau: f64,
    pub balanced_accuracy: f64,
    /// Set when the reversed decision rule (positive iff volume <= tau)
    /// would have scored strictly better, which signals inverted labels.
    pub direction_flipped: bool,
}

/// Exhaustive threshold search maximizing balanced accuracy on validation
/// pairs of (max positive volume, metastasis label). Candidates are the
/// midpoints of consecutive distinct volumes, then 0, then +inf; the first
/// best candidate in that order wins, which prefers a separating midpoint
/// over the degenerate sentinels.
pub fn select_volume_threshold(pairs: &[(f64, bool)]) -> Result<ThresholdSelection> {
    let n_pos = pairs.iter().filter(|&&(_, l)| l).count();
    if n_pos == 0 || n_pos == pairs.len() {
        return Err(Error::Degenerate("threshold selection needs both classes in validation".into()));
    }
    let mut distinct: Vec<f64> = pairs.iter().map(|&(v, _)| v).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates: Vec<f64> =
        distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    candidates.push(0.0);
    candidates.push(f64::INFINITY);

    let score = |tau: f64, flipped: bool| -> f64 {
        let mut tp = 0f64;
        let mut tn = 0f64;
        let mut pos = 0f64;
        let mut neg = 0f64;
        for &(v, label) in pairs {
            let pred = if flipped { !(v > tau) } else { v > tau };
            if label {
                pos += 1.0;
                if pred {
                    tp += 1.0;
                }
            } else {
                neg += 1.0;
                if !pred {
                    tn += 1.0;
                }
            }
        }
        balanced_accuracy(tp / pos, tn / neg)
    };

    let mut best = (candidates[0], score(candidates[0], false));
    for &tau in &candidates[1..] {
        let s = score(tau, false);
        if s > best.1 {
            best = (tau, s);
        }
    }
    let best_flipped = candidates.iter().map(|&t| score(t, true)).fold(f64::NEG_INFINITY, f64::max);
    Ok(ThresholdSelection {
        tau: best.0,
        balanced_accuracy: best.1,
        direction_flipped: best_flipped > best.1,
    })
}

/// Patient-level decision: metastasis-positive iff the largest positive
/// node volume strictly exceeds the threshold.
pub fn aggregate_by_threshold(vmax: &[f64], tau: f64) -> Vec<bool> {
    vmax.iter().map(|&v| v > tau).collect()
}
