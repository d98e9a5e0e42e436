//! Slice-embedding classifier head.
//!
//! A scan is a bag of per-slice embeddings `h_t`. The head maps it to
//!
//! ```text
//! p = sigmoid(b + (1/s) * w . sum_t relu(U h_t + a))
//! ```
//!
//! and is trained with binary cross-entropy, one patient per step.

mod adam;
mod extract;
mod scale;
mod train;

pub use adam::{adam_step, AdamState};
pub use extract::{embedding_path, patch_stat_features, read_embeddings, write_embeddings, Extractor, ExtractorKind, ExtractorSpec};
pub use scale::FeatureScaler;
pub use train::{train, Checkpoint, EpochRecord, PlateauScheduler, TrainConfig, TrainHistory};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN_UNITS: usize = 20;

/// Per-slice embeddings of one scan, shape `(s, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: Array2<f64>,
    pub patient_id: String,
    pub label: u8,
}

impl EmbeddingSequence {
    pub fn new(vectors: Array2<f64>, patient_id: impl Into<String>, label: u8) -> Result<Self> {
        let (s, d) = vectors.dim();
        if s == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!("embedding shape {s}x{d} is empty")));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite embedding entry".into()));
        }
        if label > 1 {
            return Err(Error::InvalidConfig(format!("label {label} is not binary")));
        }
        Ok(EmbeddingSequence { vectors, patient_id: patient_id.into(), label })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// Hidden weights, `hidden x d`.
    pub u: Array2<f64>,
    pub a: Array1<f64>,
    pub w: Array1<f64>,
    pub b: f64,
}

/// Gradients with the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub u: Array2<f64>,
    pub a: Array1<f64>,
    pub w: Array1<f64>,
    pub b: f64,
}

impl HeadParams {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        HeadParams { u: Array2::zeros((hidden, dim)), a: Array1::zeros(hidden), w: Array1::zeros(hidden), b: 0.0 }
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn kaiming_uniform<R: Rng>(hidden: usize, dim: usize, rng: &mut R) -> Self {
        let bu = (6.0 / dim as f64).sqrt();
        let bw = (6.0 / hidden as f64).sqrt();
        let u = Array2::from_shape_simple_fn((hidden, dim), || rng.random_range(-bu..bu));
        let w = Array1::from_shape_simple_fn(hidden, || rng.random_range(-bw..bw));
        HeadParams { u, a: Array1::zeros(hidden), w, b: 0.0 }
    }

    pub fn hidden_units(&self) -> usize {
        self.u.nrows()
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_units();
        if self.a.len() != h || self.w.len() != h {
            return Err(Error::DimensionMismatch(format!(
                "hidden units: U has {h} rows, a has {}, w has {}",
                self.a.len(),
                self.w.len()
            )));
        }
        let finite = self.u.iter().chain(self.a.iter()).chain(self.w.iter()).all(|v| v.is_finite()) && self.b.is_finite();
        if !finite {
            return Err(Error::InvalidConfig("head parameters are not finite".into()));
        }
        Ok(())
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.u.as_slice_mut().expect("standard layout"),
            self.a.as_slice_mut().expect("standard layout"),
            self.w.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.b),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.u.len() + self.a.len() + self.w.len() + 1
    }
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        HeadGrads { u: Array2::zeros(p.u.raw_dim()), a: Array1::zeros(p.a.len()), w: Array1::zeros(p.w.len()), b: 0.0 }
    }

    pub(crate) fn slices(&self) -> [&[f64]; 4] {
        [
            self.u.as_slice().expect("standard layout"),
            self.a.as_slice().expect("standard layout"),
            self.w.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.b),
        ]
    }

    pub(crate) fn add_scaled(&mut self, other: &HeadGrads, scale: f64) {
        self.u.scaled_add(scale, &other.u);
        self.a.scaled_add(scale, &other.a);
        self.w.scaled_add(scale, &other.w);
        self.b += scale * other.b;
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dims(params: &HeadParams, emb: &EmbeddingSequence) -> Result<()> {
    if params.dim() != emb.dim() {
        return Err(Error::DimensionMismatch(format!(
            "head expects d = {}, embeddings have d = {}",
            params.dim(),
            emb.dim()
        )));
    }
    Ok(())
}

struct Forward {
    /// Pre-activations `U h_t + a`, shape `(s, hidden)`.
    pre: Array2<f64>,
    pooled: Array1<f64>,
    p: f64,
}

fn forward(params: &HeadParams, emb: &EmbeddingSequence) -> Forward {
    let s = emb.vectors.nrows() as f64;
    let mut pre = emb.vectors.dot(&params.u.t());
    pre += &params.a;
    let mut pooled = Array1::<f64>::zeros(params.hidden_units());
    for row in pre.rows() {
        pooled.zip_mut_with(&row, |acc, &v| *acc += v.max(0.0));
    }
    pooled /= s;
    let z = params.b + params.w.dot(&pooled);
    Forward { pre, pooled, p: sigmoid(z) }
}

/// Probability that the scan is positive.
pub fn predict(params: &HeadParams, emb: &EmbeddingSequence) -> Result<f64> {
    check_dims(params, emb)?;
    Ok(forward(params, emb).p)
}

const P_CLAMP: f64 = 1e-12;

pub fn bce(p: f64, label: u8) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Cross-entropy loss and its exact gradient. The ReLU derivative at zero
/// is taken as zero; weight decay is left to the optimizer.
pub fn loss_and_grad(params: &HeadParams, emb: &EmbeddingSequence, label: u8) -> Result<(f64, HeadGrads)> {
    check_dims(params, emb)?;
    if label > 1 {
        return Err(Error::InvalidConfig(format!("label {label} is not binary")));
    }
    let fwd = forward(params, emb);
    let dz = fwd.p - f64::from(label);
    let s = emb.vectors.nrows() as f64;

    let mut grads = HeadGrads::zeros_like(params);
    grads.b = dz;
    grads.w = &fwd.pooled * dz;
    // d z / d pre[t, j] = w_j / s where pre > 0
    let gate = fwd.pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let scale: Array1<f64> = &params.w * (dz / s);
    let dpre = &gate * &scale;
    grads.a = dpre.sum_axis(ndarray::Axis(0));
    grads.u = dpre.t().dot(&emb.vectors);
    Ok((bce(fwd.p, label), grads))
}

/// Positive iff `p` is strictly above the threshold.
pub fn classify(p: f64, threshold: f64) -> u8 {
    u8::from(p > threshold)
}

fn encode_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

fn decode_f64s(text: &str, expected: usize, name: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::InvalidConfig(format!("{name}: bad base64: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::DimensionMismatch(format!("{name}: expected {expected} values, got {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Serialized head: shapes plus little-endian `f64` payloads in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadParamsRepr {
    pub hidden_units: usize,
    pub dim: usize,
    pub u: String,
    pub a: String,
    pub w: String,
    pub b: String,
}

impl From<&HeadParams> for HeadParamsRepr {
    fn from(p: &HeadParams) -> Self {
        HeadParamsRepr {
            hidden_units: p.hidden_units(),
            dim: p.dim(),
            u: encode_f64s(p.u.iter()),
            a: encode_f64s(p.a.iter()),
            w: encode_f64s(p.w.iter()),
            b: encode_f64s(std::iter::once(&p.b)),
        }
    }
}

impl TryFrom<&HeadParamsRepr> for HeadParams {
    type Error = Error;

    fn try_from(r: &HeadParamsRepr) -> Result<Self> {
        let (h, d) = (r.hidden_units, r.dim);
        let u = Array2::from_shape_vec((h, d), decode_f64s(&r.u, h * d, "U")?)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let p = HeadParams {
            u,
            a: Array1::from(decode_f64s(&r.a, h, "a")?),
            w: Array1::from(decode_f64s(&r.w, h, "w")?),
            b: decode_f64s(&r.b, 1, "b")?[0],
        };
        p.validate()?;
        Ok(p)
    }
}

impl Serialize for HeadParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        HeadParamsRepr::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for HeadParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = HeadParamsRepr::deserialize(d)?;
        HeadParams::try_from(&repr).map_err(serde::de::Error::custom)
    }
}
