//! Confidence intervals for cross-validated AUC from influence curves.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::{split_by_label, RocResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub se: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Pooled influence-curve variance.
    #[default]
    Influence,
    /// Student t interval over the fold AUCs, for very small folds.
    FoldT,
}

fn z_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

fn check_fold(r: &RocResult) -> Result<()> {
    if r.n_pos == 0 || r.n_neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Fraction of `others` below `x`, ties counting one half.
fn frac_below(sorted: &[f64], x: f64) -> f64 {
    let below = sorted.partition_point(|&v| v < x);
    let not_above = sorted.partition_point(|&v| v <= x);
    (below as f64 + 0.5 * (not_above - below) as f64) / sorted.len() as f64
}

/// Mean squared influence value of one fold's AUC, with class weights
/// `w_pos = 1 / tau` and `w_neg = 1 / (1 - tau)`.
fn fold_mean_sq_ic(r: &RocResult, w_pos: f64, w_neg: f64) -> f64 {
    let (mut pos, mut neg) = split_by_label(&r.scores, &r.labels);
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for &s in &pos {
        let ic = w_pos * (frac_below(&neg, s) - r.auc);
        total += ic * ic;
    }
    for &s in &neg {
        // fraction of positives scoring above s
        let ic = w_neg * ((1.0 - frac_below(&pos, s)) - r.auc);
        total += ic * ic;
    }
    total / (pos.len() + neg.len()) as f64
}

fn interval(mean: f64, se: f64, z: f64) -> Interval {
    Interval { mean, lo: (mean - z * se).clamp(0.0, 1.0), hi: (mean + z * se).clamp(0.0, 1.0), se }
}

fn pooled(per_fold: &[RocResult], alpha: f64, n_eff: impl Fn(usize) -> usize) -> Result<Interval> {
    let z = z_quantile(alpha)?;
    per_fold.iter().try_for_each(check_fold)?;
    let n_total: usize = per_fold.iter().map(|r| r.n_pos + r.n_neg).sum();
    let n_pos: usize = per_fold.iter().map(|r| r.n_pos).sum();
    let tau = n_pos as f64 / n_total as f64;
    let k = per_fold.len() as f64;
    let mean = per_fold.iter().map(|r| r.auc).sum::<f64>() / k;
    let sighat2 = per_fold.iter().map(|r| fold_mean_sq_ic(r, 1.0 / tau, 1.0 / (1.0 - tau))).sum::<f64>() / k;
    let se = (sighat2 / n_eff(n_total) as f64).sqrt();
    Ok(interval(mean, se, z))
}

/// Cross-validated AUC over disjoint validation folds: the mean fold AUC
/// with a normal interval from the pooled influence-curve variance.
pub fn cv_auc_ci(per_fold: &[RocResult], alpha: f64) -> Result<Interval> {
    if per_fold.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {}", per_fold.len())));
    }
    pooled(per_fold, alpha, |n| n)
}

/// Interval for a single held-out evaluation.
pub fn auc_ci(roc: &RocResult, alpha: f64) -> Result<Interval> {
    pooled(std::slice::from_ref(roc), alpha, |n| n)
}

/// Several models scored on the same patients (each fold's model on a
/// shared external set). Variance is pooled across models but divided by
/// the number of distinct patients, not the number of evaluations.
pub fn repeated_auc_ci(per_model: &[RocResult], alpha: f64) -> Result<Interval> {
    let first = per_model.first().ok_or_else(|| Error::InvalidConfig("no evaluations".into()))?;
    let n = first.patient_ids.len();
    if per_model.iter().any(|r| r.patient_ids != first.patient_ids) {
        return Err(Error::UnpairedRoc);
    }
    pooled(per_model, alpha, |_| n)
}

/// Student t interval over fold AUCs.
pub fn fold_t_ci(per_fold: &[RocResult], alpha: f64) -> Result<Interval> {
    z_quantile(alpha)?;
    if per_fold.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {}", per_fold.len())));
    }
    per_fold.iter().try_for_each(check_fold)?;
    let k = per_fold.len() as f64;
    let mean = per_fold.iter().map(|r| r.auc).sum::<f64>() / k;
    let var = per_fold.iter().map(|r| (r.auc - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let t = StudentsT::new(0.0, 1.0, k - 1.0)
        .map_err(|e| Error::Other(e.to_string()))?
        .inverse_cdf(1.0 - alpha / 2.0);
    Ok(interval(mean, (var / k).sqrt(), t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as Gauss};

    fn roc(scores: Vec<f64>, labels: Vec<u8>) -> RocResult {
        let ids = (0..scores.len()).map(|i| format!("p{i:03}")).collect();
        RocResult::new(ids, scores, labels).unwrap()
    }

    /// Fold of `n` patients, balanced, positives shifted by `shift`.
    fn random_fold(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> RocResult {
        let g = Gauss::new(0.0, 1.0).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let scores = labels.iter().map(|&y| g.sample(rng) + shift * f64::from(y)).collect();
        roc(scores, labels)
    }

    /// Direct double loop over pairs for the influence values.
    fn oracle_sighat2(folds: &[RocResult]) -> f64 {
        let n: usize = folds.iter().map(|r| r.labels.len()).sum();
        let tau = folds.iter().map(|r| r.n_pos).sum::<usize>() as f64 / n as f64;
        let mut acc = 0.0;
        for r in folds {
            let mut fold_sum = 0.0;
            for i in 0..r.scores.len() {
                let mut credit = 0.0;
                let mut others = 0.0;
                for j in 0..r.scores.len() {
                    if r.labels[j] == r.labels[i] {
                        continue;
                    }
                    others += 1.0;
                    let (p, q) = if r.labels[i] == 1 { (r.scores[i], r.scores[j]) } else { (r.scores[j], r.scores[i]) };
                    credit += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
                }
                let w = if r.labels[i] == 1 { 1.0 / tau } else { 1.0 / (1.0 - tau) };
                let ic = w * (credit / others - r.auc);
                fold_sum += ic * ic;
            }
            acc += fold_sum / r.scores.len() as f64;
        }
        acc / folds.len() as f64
    }

    #[test]
    fn influence_variance_matches_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let folds: Vec<RocResult> = (0..5).map(|_| random_fold(&mut rng, 20, 0.8)).collect();
        let ci = cv_auc_ci(&folds, 0.05).unwrap();
        let se = (oracle_sighat2(&folds) / 100.0).sqrt();
        assert!((ci.se - se).abs() < 1e-14);
        assert!((ci.hi - ci.mean - 1.959963984540054 * se).abs() < 1e-12);
    }

    #[test]
    fn perfect_folds_give_degenerate_interval() {
        let f = roc(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]);
        let ci = cv_auc_ci(&[f.clone(), f], 0.05).unwrap();
        assert_eq!((ci.mean, ci.lo, ci.hi), (1.0, 1.0, 1.0));
    }

    #[test]
    fn duplicated_fold_equals_doubled_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_fold(&mut rng, 30, 0.5);
        let g = random_fold(&mut rng, 30, 0.5);
        let a = cv_auc_ci(&[f.clone(), f.clone(), g.clone()], 0.05).unwrap();
        let b = cv_auc_ci(&[f.clone(), g.clone(), f.clone()], 0.05).unwrap();
        assert_eq!(a, b);
        let two = cv_auc_ci(&[f.clone(), f.clone()], 0.05).unwrap();
        let one = auc_ci(&f, 0.05).unwrap();
        assert_eq!(two.mean, one.mean);
        // same per-patient variance, twice the patients
        assert!((two.se * 2f64.sqrt() - one.se).abs() < 1e-15);
    }

    #[test]
    fn interval_is_clamped_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let shift = rng.random_range(-3.0..3.0);
            let folds: Vec<RocResult> = (0..3).map(|_| random_fold(&mut rng, 6, shift)).collect();
            let ci = cv_auc_ci(&folds, 0.05).unwrap();
            assert!(0.0 <= ci.lo && ci.lo <= ci.mean && ci.mean <= ci.hi && ci.hi <= 1.0);
        }
    }

    #[test]
    fn repeated_evaluation_divides_by_distinct_patients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_fold(&mut rng, 40, 1.0);
        let mut g = random_fold(&mut rng, 40, 1.0);
        g.patient_ids = f.patient_ids.clone();
        let rep = repeated_auc_ci(&[f.clone(), g.clone()], 0.05).unwrap();
        let cv = cv_auc_ci(&[f.clone(), g.clone()], 0.05).unwrap();
        assert_eq!(rep.mean, cv.mean);
        assert!((rep.se - cv.se * 2f64.sqrt()).abs() < 1e-15);
        let mut h = g.clone();
        h.patient_ids[0] = "other".into();
        assert!(matches!(repeated_auc_ci(&[f, h], 0.05), Err(Error::UnpairedRoc)));
    }

    #[test]
    fn fold_t_interval() {
        let mk = |a: f64| RocResult { auc: a, ..roc(vec![0.0, 1.0], vec![0, 1]) };
        let folds = [mk(0.6), mk(0.7), mk(0.8)];
        let ci = fold_t_ci(&folds, 0.05).unwrap();
        // sd 0.1, se 0.1/sqrt(3), t(2) quantile 4.302653
        assert!((ci.mean - 0.7).abs() < 1e-12);
        assert!((ci.hi - (0.7 + 4.302652729696 * 0.1 / 3f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let f = roc(vec![0.1, 0.9], vec![0, 1]);
        assert!(cv_auc_ci(std::slice::from_ref(&f), 0.05).is_err());
        assert!(cv_auc_ci(&[f.clone(), f.clone()], 1.5).is_err());
    }
}
