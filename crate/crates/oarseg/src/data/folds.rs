//! Cross-validation fold construction: seeded shuffle, round-robin.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of patient ids into k folds of near-equal size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn validation_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn training_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle then round-robin assignment; fold sizes differ by at
/// most one.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    if k > ids.len() {
        return Err(Error::config(format!(
            "{k} folds for only {} cases",
            ids.len()
        )));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let assignments = shuffled
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldSplit {
        k,
        assignments,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:03}")).collect()
    }

    #[test]
    fn sizes_194_into_5() {
        let split = make_folds(&ids(194), 5, 0).unwrap();
        let mut sizes = split.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![38, 39, 39, 39, 39]);
    }

    #[test]
    fn deterministic_and_partitioning() {
        let all = ids(23);
        let a = make_folds(&all, 4, 9).unwrap();
        let b = make_folds(&all, 4, 9).unwrap();
        assert_eq!(a.assignments, b.assignments);
        // union of validation folds = all ids, disjoint
        let mut seen = std::collections::BTreeSet::new();
        for f in 0..4 {
            for id in a.validation_ids(f) {
                assert!(seen.insert(id));
            }
        }
        assert_eq!(seen.len(), 23);
    }

    #[test]
    fn too_few_folds_rejected() {
        assert!(make_folds(&ids(10), 1, 0).is_err());
        assert!(make_folds(&ids(3), 5, 0).is_err());
    }
}
