//! DeLong's test for two correlated AUCs on the same patients.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{midranks, RocResult};
use crate::error::{Error, Result};

/// Per-patient placement values of one score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralComponents {
    /// One per positive: fraction of negatives it outscores.
    pub v10: Vec<f64>,
    /// One per negative: fraction of positives that outscore it.
    pub v01: Vec<f64>,
}

/// Placement values from midranks: for a positive with midrank `r` in the
/// pooled sample and `r_pos` among positives, `V10 = (r - r_pos) / n_neg`.
pub fn structural_components(scores: &[f64], labels: &[u8]) -> StructuralComponents {
    let idx = |want: u8| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == want).collect() };
    let (pos, neg) = (idx(1), idx(0));
    let all = midranks(scores);
    let within = |ids: &[usize]| midranks(&ids.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    let (pos_r, neg_r) = (within(&pos), within(&neg));
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    StructuralComponents {
        v10: pos.iter().zip(&pos_r).map(|(&i, r)| (all[i] - r) / n).collect(),
        // positives above a negative = m - (positives below + half ties)
        v01: neg.iter().zip(&neg_r).map(|(&j, r)| (m - (all[j] - r)) / m).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub auc_diff: f64,
    /// Infinite when the difference has zero variance but is nonzero.
    #[serde(with = "extended_f64")]
    pub z: f64,
    pub p: f64,
}

impl DelongResult {
    pub fn significant(&self, level: f64) -> bool {
        self.p <= level
    }
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (k - 1.0)
}

/// Paired patients by id, so the two results may list them in any order.
fn aligned(a: &RocResult, b: &RocResult) -> Result<(Vec<f64>, Vec<f64>, Vec<u8>)> {
    if a.patient_ids.len() != b.patient_ids.len() {
        return Err(Error::UnpairedRoc);
    }
    let index: std::collections::HashMap<&str, usize> =
        b.patient_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    if index.len() != b.patient_ids.len() {
        return Err(Error::UnpairedRoc);
    }
    let mut sb = Vec::with_capacity(a.scores.len());
    for (id, &y) in a.patient_ids.iter().zip(&a.labels) {
        let &j = index.get(id.as_str()).ok_or(Error::UnpairedRoc)?;
        if b.labels[j] != y {
            return Err(Error::UnpairedRoc);
        }
        sb.push(b.scores[j]);
    }
    Ok((a.scores.clone(), sb, a.labels.clone()))
}

/// Two-sided DeLong test of `auc_a == auc_b`.
pub fn delong_test(a: &RocResult, b: &RocResult) -> Result<DelongResult> {
    let (sa, sb, labels) = aligned(a, b)?;
    let ca = structural_components(&sa, &labels);
    let cb = structural_components(&sb, &labels);
    let (m, n) = (ca.v10.len() as f64, ca.v01.len() as f64);
    if m == 0.0 || n == 0.0 {
        return Err(Error::SingleClass);
    }
    let auc_a = ca.v10.iter().sum::<f64>() / m;
    let auc_b = cb.v10.iter().sum::<f64>() / m;
    let s10 = [sample_cov(&ca.v10, &ca.v10), sample_cov(&cb.v10, &cb.v10), sample_cov(&ca.v10, &cb.v10)];
    let s01 = [sample_cov(&ca.v01, &ca.v01), sample_cov(&cb.v01, &cb.v01), sample_cov(&ca.v01, &cb.v01)];
    let var = |i: usize| s10[i] / m + s01[i] / n;
    Ok(finish(auc_a, auc_b, var(0) + var(1) - 2.0 * var(2)))
}

fn auc_variance(r: &RocResult) -> Result<(f64, f64)> {
    let c = structural_components(&r.scores, &r.labels);
    let (m, n) = (c.v10.len() as f64, c.v01.len() as f64);
    if m == 0.0 || n == 0.0 {
        return Err(Error::SingleClass);
    }
    let auc = c.v10.iter().sum::<f64>() / m;
    Ok((auc, sample_cov(&c.v10, &c.v10) / m + sample_cov(&c.v01, &c.v01) / n))
}

/// DeLong comparison of AUCs from two independent patient samples; the
/// covariance term vanishes.
pub fn delong_unpaired(a: &RocResult, b: &RocResult) -> Result<DelongResult> {
    let (auc_a, var_a) = auc_variance(a)?;
    let (auc_b, var_b) = auc_variance(b)?;
    Ok(finish(auc_a, auc_b, var_a + var_b))
}

fn finish(auc_a: f64, auc_b: f64, var_diff: f64) -> DelongResult {
    let var_diff = var_diff.max(0.0);
    let diff = auc_a - auc_b;
    let (z, p) = if var_diff > 0.0 {
        let z = diff / var_diff.sqrt();
        (z, 2.0 * Normal::standard().sf(z.abs()))
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (diff.signum() * f64::INFINITY, 0.0)
    };
    DelongResult { auc_a, auc_b, auc_diff: diff, z, p }
}

/// JSON has no infinities, so they travel as the strings "inf" and "-inf".
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            x => s.serialize_f64(x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number, got {t:?}"))),
        }
    }
}
