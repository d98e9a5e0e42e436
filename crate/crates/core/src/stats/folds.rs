use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which validation fold each patient belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Validation patients of fold `f`, sorted by id.
    pub fn test_ids(&self, f: usize) -> Vec<&str> {
        self.fold_of.iter().filter(|(_, &g)| g == f).map(|(id, _)| id.as_str()).collect()
    }

    pub fn train_ids(&self, f: usize) -> Vec<&str> {
        self.fold_of.iter().filter(|(_, &g)| g != f).map(|(id, _)| id.as_str()).collect()
    }

    /// SHA-256 of the sorted `id=fold` lines; equal hashes mean the same split.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("k={}\n", self.k));
        for (id, f) in &self.fold_of {
            h.update(format!("{id}={f}\n"));
        }
        hex::encode(h.finalize())
    }
}

/// Seeded stratified split. Within each class (0 first) the sorted ids are
/// shuffled and dealt round-robin; the dealing position carries over from
/// one class to the next so fold sizes stay balanced overall.
pub fn stratified_kfold(labels: &BTreeMap<String, u8>, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut offset = 0;
    for class in [0u8, 1] {
        let mut ids: Vec<&String> = labels.iter().filter(|(_, &y)| y == class).map(|(id, _)| id).collect();
        if ids.len() < k {
            return Err(Error::TooFewInClass { label: class, count: ids.len(), k });
        }
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            fold_of.insert((*id).clone(), (offset + i) % k);
        }
        offset += ids.len();
    }
    if let Some((id, y)) = labels.iter().find(|(_, &y)| y > 1) {
        return Err(Error::InvalidConfig(format!("patient {id} has non-binary label {y}")));
    }
    Ok(FoldAssignment { k, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n_neg: usize, n_pos: usize) -> BTreeMap<String, u8> {
        (0..n_neg).map(|i| (format!("n{i:02}"), 0)).chain((0..n_pos).map(|i| (format!("p{i:02}"), 1))).collect()
    }

    fn counts(a: &FoldAssignment, l: &BTreeMap<String, u8>, class: u8) -> Vec<usize> {
        let mut c = vec![0; a.k];
        for (id, &f) in &a.fold_of {
            if l[id] == class {
                c[f] += 1;
            }
        }
        c
    }

    #[test]
    fn five_by_five() {
        let l = labels(5, 5);
        let a = stratified_kfold(&l, 5, 3).unwrap();
        assert_eq!(counts(&a, &l, 0), vec![1; 5]);
        assert_eq!(counts(&a, &l, 1), vec![1; 5]);
        assert_eq!(a, stratified_kfold(&l, 5, 3).unwrap());
        assert_eq!(a.hash(), stratified_kfold(&l, 5, 3).unwrap().hash());
    }

    #[test]
    fn matches_direct_dealing() {
        let l = labels(16, 17);
        let a = stratified_kfold(&l, 5, 42).unwrap();
        // replay: same generator, same order of shuffles
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut neg: Vec<String> = (0..16).map(|i| format!("n{i:02}")).collect();
        let mut pos: Vec<String> = (0..17).map(|i| format!("p{i:02}")).collect();
        neg.shuffle(&mut rng);
        pos.shuffle(&mut rng);
        for (i, id) in neg.iter().enumerate() {
            assert_eq!(a.fold_of[id], i % 5);
        }
        for (i, id) in pos.iter().enumerate() {
            assert_eq!(a.fold_of[id], (16 + i) % 5);
        }
        let sizes: Vec<usize> = (0..5).map(|f| a.test_ids(f).len()).collect();
        assert_eq!(sizes, vec![7, 7, 7, 6, 6]);
        assert_eq!(counts(&a, &l, 0), vec![4, 3, 3, 3, 3]);
        assert_eq!(counts(&a, &l, 1), vec![3, 4, 4, 3, 3]);
    }

    #[test]
    fn too_few_in_class() {
        assert!(matches!(stratified_kfold(&labels(4, 9), 5, 0), Err(Error::TooFewInClass { label: 0, count: 4, k: 5 })));
        assert!(stratified_kfold(&labels(4, 4), 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn stratification_and_coverage(n_neg in 5usize..40, n_pos in 5usize..40, k in 2usize..6, seed in 0u64..1000) {
            let l = labels(n_neg, n_pos);
            let a = stratified_kfold(&l, k, seed).unwrap();
            prop_assert_eq!(a.fold_of.len(), l.len());
            for class in [0u8, 1] {
                let c = counts(&a, &l, class);
                prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            }
            for f in 0..k {
                prop_assert_eq!(a.test_ids(f).len() + a.train_ids(f).len(), l.len());
            }
        }
    }
}
