//! Cross-validation splits over matched pairs.
//!
//! Pairs are shuffled once and dealt into `n_folds` groups. For fold `f`,
//! group `f` is the test group (used in both domains), the next group in
//! cyclic order is the target-validation group, and the remaining groups
//! form the training pool. Source validation takes whole pairs from the
//! first pool group.

use std::collections::BTreeMap;

use super::{CohortError, Domain, Result, VolumeRecord};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub source_train: Vec<u32>,
    pub source_val: Vec<u32>,
    pub target_val: Vec<u32>,
    pub source_test: Vec<u32>,
    pub target_test: Vec<u32>,
}

impl FoldSplit {
    /// (role name, subject ids) for every role, in a fixed order.
    pub fn roles(&self) -> [(&'static str, &[u32]); 5] {
        [
            ("source_train", &self.source_train),
            ("source_val", &self.source_val),
            ("target_val", &self.target_val),
            ("source_test", &self.source_test),
            ("target_test", &self.target_test),
        ]
    }
}

fn pairs_of(records: &[VolumeRecord]) -> Result<Vec<[u32; 2]>> {
    // pair -> (control, case)
    let mut pairs: BTreeMap<u32, (Option<u32>, Option<u32>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.domain == Domain::Source) {
        let slot = pairs.entry(r.pair_id).or_default();
        let target = if r.label == 0 { &mut slot.0 } else { &mut slot.1 };
        if target.replace(r.subject_id).is_some() {
            return Err(CohortError::Data(format!(
                "pair {} has more than one subject with label {}",
                r.pair_id, r.label
            )));
        }
    }
    pairs
        .into_iter()
        .map(|(id, p)| match p {
            (Some(control), Some(case)) => Ok([control, case]),
            _ => Err(CohortError::Data(format!("pair {id} lacks a case or a control"))),
        })
        .collect()
}

fn flatten(groups: &[&Vec<[u32; 2]>]) -> Vec<u32> {
    let mut ids: Vec<u32> = groups.iter().flat_map(|g| g.iter().flatten().copied()).collect();
    ids.sort_unstable();
    ids
}

/// Builds `n_folds` splits. `source_val_size` counts subjects and is taken
/// in whole pairs (an odd size rounds down).
pub fn make_folds(
    records: &[VolumeRecord],
    n_folds: usize,
    source_val_size: usize,
    rng: &mut RngStream,
) -> Result<Vec<FoldSplit>> {
    if n_folds < 3 {
        return Err(CohortError::Config(format!(
            "n_folds must be >= 3 (test, target validation, training), got {n_folds}"
        )));
    }
    let mut pairs = pairs_of(records)?;
    if pairs.len() < n_folds {
        return Err(CohortError::Config(format!(
            "{} pairs cannot fill {n_folds} folds",
            pairs.len()
        )));
    }
    rng.shuffle(&mut pairs);
    let mut groups: Vec<Vec<[u32; 2]>> = vec![Vec::new(); n_folds];
    for (i, p) in pairs.into_iter().enumerate() {
        groups[i % n_folds].push(p);
    }

    let val_pairs = source_val_size / 2;
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let order: Vec<usize> = (1..n_folds).map(|k| (f + k) % n_folds).collect();
        let test = &groups[f];
        let target_val = &groups[order[0]];
        let pool: Vec<&Vec<[u32; 2]>> = order[1..].iter().map(|&g| &groups[g]).collect();

        let first = pool[0];
        let take = val_pairs.min(first.len());
        let source_val: Vec<[u32; 2]> = first[..take].to_vec();
        let mut train_pairs: Vec<[u32; 2]> = first[take..].to_vec();
        for g in &pool[1..] {
            train_pairs.extend(g.iter().copied());
        }
        if train_pairs.is_empty() {
            return Err(CohortError::Config(format!(
                "fold {f}: source validation consumes the whole training pool"
            )));
        }
        if source_val.is_empty() {
            return Err(CohortError::Config(format!(
                "fold {f}: source validation would be empty (source_val_size {source_val_size})"
            )));
        }
        let test_ids = flatten(&[test]);
        folds.push(FoldSplit {
            fold_index: f,
            source_train: flatten(&[&train_pairs]),
            source_val: flatten(&[&source_val]),
            target_val: flatten(&[target_val]),
            source_test: test_ids.clone(),
            target_test: test_ids,
        });
    }
    Ok(folds)
}
