use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, Label, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoilSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// One cross-validation fold: held-out coils and everything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test: Vec<String>,
    pub rest: Vec<String>,
}

/// Sorted, shuffled ids of one class.
fn class_ids(coils: &[(String, Label)], label: Label, rng: &mut seed::Rng) -> Vec<String> {
    let mut ids: Vec<String> = coils.iter().filter(|(_, l)| *l == label).map(|(id, _)| id.clone()).collect();
    ids.sort();
    ids.dedup();
    ids.shuffle(rng);
    ids
}

/// Splits coils per class into `round(fraction · n)` train coils, kept within
/// `[1, n − 1]` whenever a class has two or more coils.
pub fn stratified_split(coils: &[(String, Label)], train_fraction: f64, seed: u64) -> Result<CoilSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut rng = seed::rng(seed);
    let mut split = CoilSplit {
        train: Vec::new(),
        validation: Vec::new(),
    };
    for label in [Label::Normal, Label::Broken] {
        let ids = class_ids(coils, label, &mut rng);
        let n = ids.len();
        if n == 0 {
            return Err(DataError::MissingClass(label));
        }
        let mut n_train = (train_fraction * n as f64 + 0.5).floor() as usize;
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        } else {
            n_train = 1;
        }
        split.train.extend_from_slice(&ids[..n_train]);
        split.validation.extend_from_slice(&ids[n_train..]);
    }
    split.train.sort();
    split.validation.sort();
    Ok(split)
}

/// Partitions coils into `k` held-out sets. Broken coils are dealt first,
/// round-robin, so every fold holds at least one; normal coils continue the
/// deal, which keeps fold sizes within one of each other.
pub fn leave_coils_out_folds(coils: &[(String, Label)], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(DataError::Invalid(format!("k = {k}; at least 2 folds are required")));
    }
    let mut rng = seed::rng(seed);
    let broken = class_ids(coils, Label::Broken, &mut rng);
    let normal = class_ids(coils, Label::Normal, &mut rng);
    if normal.is_empty() {
        return Err(DataError::MissingClass(Label::Normal));
    }
    if broken.len() < k {
        return Err(DataError::TooFewBroken { broken: broken.len(), k });
    }
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in broken.iter().chain(&normal).enumerate() {
        tests[i % k].push(id.clone());
    }
    let mut all: Vec<String> = broken.iter().chain(&normal).cloned().collect();
    all.sort();
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(index, mut test)| {
            test.sort();
            let rest = all.iter().filter(|id| test.binary_search(id).is_err()).cloned().collect();
            Fold { index, test, rest }
        })
        .collect())
}
