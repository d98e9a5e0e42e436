use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::EmbeddingSequence;
use crate::error::{Error, Result};

/// Per-dimension standardization of slice embeddings, fitted on the
/// training slices of one system and frozen afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant dimensions keep 1.
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(set: &[EmbeddingSequence]) -> Result<Self> {
        let Some(first) = set.first() else {
            return Err(Error::InvalidConfig("cannot fit a feature scaler on no embeddings".into()));
        };
        let d = first.dim();
        if let Some(e) = set.iter().find(|e| e.dim() != d) {
            return Err(Error::DimensionMismatch(format!("patient {} has d = {}, expected {d}", e.patient_id, e.dim())));
        }
        let n: usize = set.iter().map(|e| e.vectors.nrows()).sum();
        let mut sum = Array1::<f64>::zeros(d);
        for e in set {
            sum += &e.vectors.sum_axis(Axis(0));
        }
        let mean = sum / n as f64;
        let mut sq = Array1::<f64>::zeros(d);
        for e in set {
            for row in e.vectors.rows() {
                sq.zip_mut_with(&(&row - &mean), |a, &b| *a += b * b);
            }
        }
        let std = sq.mapv(|v| {
            let s = (v / n as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Ok(FeatureScaler { mean: mean.to_vec(), std: std.to_vec() })
    }

    pub fn apply(&self, e: &mut EmbeddingSequence) -> Result<()> {
        if e.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!("embedding d = {}, scaler d = {}", e.dim(), self.mean.len())));
        }
        for mut row in e.vectors.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn standardizes_pooled_slices() {
        let a = EmbeddingSequence::new(array![[1.0, 5.0], [3.0, 5.0]], "a", 0).unwrap();
        let b = EmbeddingSequence::new(array![[5.0, 5.0]], "b", 1).unwrap();
        let s = FeatureScaler::fit(&[a.clone(), b]).unwrap();
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.std, vec![(8.0f64 / 3.0).sqrt(), 1.0]);
        let mut a2 = a;
        s.apply(&mut a2).unwrap();
        assert_eq!(a2.vectors[[1, 0]], 0.0);
        assert_eq!(a2.vectors.column(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_checks() {
        let a = EmbeddingSequence::new(array![[1.0, 2.0]], "a", 0).unwrap();
        let b = EmbeddingSequence::new(array![[1.0]], "b", 0).unwrap();
        assert!(FeatureScaler::fit(&[a.clone(), b.clone()]).is_err());
        assert!(FeatureScaler::fit(&[]).is_err());
        let mut b = b;
        assert!(FeatureScaler::fit(&[a]).unwrap().apply(&mut b).is_err());
    }
}
