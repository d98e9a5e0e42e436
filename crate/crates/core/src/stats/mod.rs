//! ROC statistics, cross-validated AUC intervals, DeLong comparisons and
//! stratified fold assignment.

mod cvauc;
mod delong;
mod folds;

pub use cvauc::{auc_ci, cv_auc_ci, fold_t_ci, repeated_auc_ci, CiMethod, Interval};
pub use delong::{delong_test, delong_unpaired, structural_components, DelongResult, StructuralComponents};
pub use folds::{stratified_kfold, FoldAssignment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores of one model over one set of patients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub patient_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RocResult {
    pub fn new(patient_ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if patient_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids, {} scores, {} labels",
                patient_ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        let auc = auc(&scores, &labels)?;
        let n_pos = labels.iter().filter(|&&y| y == 1).count();
        Ok(RocResult { auc, n_pos, n_neg: labels.len() - n_pos, patient_ids, scores, labels })
    }

    /// Positive and negative scores, in input order.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        split_by_label(&self.scores, &self.labels)
    }
}

fn split_by_label(scores: &[f64], labels: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &y) in scores.iter().zip(labels) {
        if y == 1 {
            pos.push(s)
        } else {
            neg.push(s)
        }
    }
    (pos, neg)
}

/// Midranks (1-based, ties averaged) of `values`.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: the fraction of positive/negative pairs ordered
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::InvalidConfig(format!("label {y} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (pos, neg) = split_by_label(scores, labels);
        let mut credit = 0.0;
        for &p in &pos {
            for &n in &neg {
                credit += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        credit / (pos.len() * neg.len()) as f64
    }

    /// Random scores on a coarse grid so ties are common.
    pub(crate) fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
        let n = rng.random_range(2..=max_n);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores = (0..n).map(|i| f64::from(rng.random_range(0..8u8)) / 8.0 + 0.1 * f64::from(labels[i])).collect();
        (scores, labels)
    }

    #[test]
    fn separated_and_tied() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.4; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::SingleClass)));
        assert!(auc(&[0.1], &[0, 1]).is_err());
    }

    #[test]
    fn matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (s, y) = random_instance(&mut rng, 50);
            assert!((auc(&s, &y).unwrap() - brute_force_auc(&s, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, y) = random_instance(&mut rng, 40);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn flipping_scores_complements(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, y) = random_instance(&mut rng, 40);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&s, &y).unwrap() + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
