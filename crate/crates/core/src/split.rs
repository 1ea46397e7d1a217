//! Nested cross-validation splitting: per fold, the held-out 20% is the
//! test set and the remaining patients split 64/16 into train/validation,
//! stratified by the patient label.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Input(format!("split serialization failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: bad split file: {e}", path.as_ref().display())))
    }
}

/// K-fold nested split over (patient id, label) pairs. Test folds partition
/// the cohort; within each fold the remainder splits 80/20 into train and
/// validation. Everything is deterministic in the seed.
pub fn nested_cv_split(
    patients: &[(String, bool)],
    k: usize,
    seed: u64,
    stratified: bool,
) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config("nested CV needs k >= 2".into()));
    }
    let ids: BTreeSet<&str> = patients.iter().map(|(id, _)| id.as_str()).collect();
    if ids.len() != patients.len() {
        return Err(Error::Input("duplicate patient ids in split input".into()));
    }
    let groups: Vec<Vec<&(String, bool)>> = if stratified {
        let pos: Vec<&(String, bool)> = patients.iter().filter(|(_, l)| *l).collect();
        let neg: Vec<&(String, bool)> = patients.iter().filter(|(_, l)| !*l).collect();
        if pos.len() < k || neg.len() < k {
            return Err(Error::Degenerate(format!(
                "stratified split needs >= {k} patients per class, got {} positive / {} negative",
                pos.len(),
                neg.len()
            )));
        }
        vec![pos, neg]
    } else {
        if patients.len() < k {
            return Err(Error::Degenerate(format!("need >= {k} patients, got {}", patients.len())));
        }
        vec![patients.iter().collect()]
    };

    // deal each shuffled group round-robin into k test folds
    let mut test_folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (gi, group) in groups.iter().enumerate() {
        let mut order: Vec<usize> = (0..group.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(gi as u64);
        order.shuffle(&mut rng);
        for (pos, &idx) in order.iter().enumerate() {
            test_folds[pos % k].push(group[idx].0.clone());
        }
    }

    let mut folds = Vec::with_capacity(k);
    for fi in 0..k {
        let test: BTreeSet<&str> = test_folds[fi].iter().map(|s| s.as_str()).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (gi, group) in groups.iter().enumerate() {
            let rest: Vec<&str> =
                group.iter().filter(|(id, _)| !test.contains(id.as_str())).map(|(id, _)| id.as_str()).collect();
            let mut order: Vec<usize> = (0..rest.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1000 + (fi * groups.len() + gi) as u64);
            order.shuffle(&mut rng);
            // 20% of the remainder = 16% of the cohort
            let n_val = ((rest.len() as f64) * 0.2).round() as usize;
            let n_val = n_val.clamp(1, rest.len().saturating_sub(1));
            for (pos, &idx) in order.iter().enumerate() {
                if pos < n_val {
                    val.push(rest[idx].to_string());
                } else {
                    train.push(rest[idx].to_string());
                }
            }
        }
        train.sort();
        val.sort();
        let mut test_sorted = test_folds[fi].clone();
        test_sorted.sort();
        folds.push(Fold { train, val, test: test_sorted });
    }
    Ok(SplitPlan { k, seed, stratified, folds })
}
