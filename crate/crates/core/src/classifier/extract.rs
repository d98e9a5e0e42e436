//! Per-slice embedding backends standing in for a frozen image network.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::formats::InputFormat;
use crate::noise::{sobel_magnitude, SOBEL_RAMP_GAIN};
use crate::volume::Volume;

pub const EMBEDDING_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    PatchStat,
    RandomProjection,
    PrecomputedFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    pub kind: ExtractorKind,
    pub dim: usize,
    pub seed: u64,
    /// Directory of `<patient_id>.<format>.emb` files.
    pub path: Option<PathBuf>,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec { kind: ExtractorKind::PatchStat, dim: 84, seed: 0, path: None }
    }
}

impl ExtractorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("extractor: dim must be at least 1".into()));
        }
        if self.kind == ExtractorKind::PrecomputedFile && self.path.is_none() {
            return Err(Error::InvalidConfig("extractor: precomputed_file needs a path".into()));
        }
        Ok(())
    }
}

type Projection = Arc<Array2<f32>>;

/// A configured embedding backend. Safe to share across threads.
#[derive(Debug)]
pub struct Extractor {
    spec: ExtractorSpec,
    projections: Mutex<BTreeMap<(usize, usize), Projection>>,
}

impl Extractor {
    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Extractor { spec: spec.clone(), projections: Mutex::new(BTreeMap::new()) })
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn extract(&self, vol: &Volume, patient_id: &str, label: u8, format: InputFormat) -> Result<EmbeddingSequence> {
        let d = self.spec.dim;
        let vectors = match self.spec.kind {
            ExtractorKind::PatchStat => {
                let mut out = Array2::zeros((vol.slices(), d));
                for t in 0..vol.slices() {
                    let img = vol.slice(t).mapv(f64::from);
                    out.row_mut(t).assign(&ndarray::Array1::from(patch_stat_features(img.view(), d)));
                }
                out
            }
            ExtractorKind::RandomProjection => {
                let proj = self.projection(vol.hw());
                let mut out = Array2::zeros((vol.slices(), d));
                for t in 0..vol.slices() {
                    let flat: Vec<f32> = vol.slice(t).iter().copied().collect();
                    for (k, row) in proj.rows().into_iter().enumerate() {
                        out[[t, k]] = row.iter().zip(&flat).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                    }
                }
                out
            }
            ExtractorKind::PrecomputedFile => {
                let dir = self.spec.path.as_deref().expect("validated");
                let path = embedding_path(dir, patient_id, format);
                let emb = read_embeddings(&path, label)?;
                if emb.dim() != d {
                    return Err(Error::DimensionMismatch(format!("{}: d = {}, extractor expects {d}", path.display(), emb.dim())));
                }
                if emb.vectors.nrows() != vol.slices() {
                    return Err(Error::DimensionMismatch(format!(
                        "{}: {} rows for a volume of {} slices",
                        path.display(),
                        emb.vectors.nrows(),
                        vol.slices()
                    )));
                }
                emb.vectors
            }
        };
        EmbeddingSequence::new(vectors, patient_id, label)
    }

    fn projection(&self, hw: (usize, usize)) -> Projection {
        let mut cache = self.projections.lock().expect("projection cache poisoned");
        cache
            .entry(hw)
            .or_insert_with(|| {
                let n = hw.0 * hw.1;
                let scale = 1.0 / (n as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
                Arc::new(Array2::from_shape_simple_fn((self.spec.dim, n), || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                }))
            })
            .clone()
    }
}

/// Regional mean, standard deviation, maximum and gradient energy on a
/// pyramid of 1x1, 2x2, 4x4, ... grids, truncated or zero-padded to `d`
/// values. The maximum plays the part of a max-pooled local detector.
pub fn patch_stat_features(img: ArrayView2<'_, f64>, d: usize) -> Vec<f64> {
    let (h, w) = img.dim();
    let grad = sobel_magnitude(&img.to_owned()).mapv(|g| (g / SOBEL_RAMP_GAIN).powi(2));
    let mut out = Vec::with_capacity(d);
    let mut g = 1;
    while out.len() < d && g <= h.min(w) {
        for ry in 0..g {
            for rx in 0..g {
                let win = s![ry * h / g..(ry + 1) * h / g, rx * w / g..(rx + 1) * w / g];
                let region = img.slice(win);
                let n = region.len() as f64;
                let mean = region.sum() / n;
                let var = region.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let max = region.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                out.extend([mean, var.sqrt(), max, grad.slice(win).sum() / n]);
            }
        }
        g *= 2;
    }
    out.resize(d, 0.0);
    out
}

/// `<dir>/<patient_id>.<format>.emb`
pub fn embedding_path(dir: &Path, patient_id: &str, format: InputFormat) -> PathBuf {
    dir.join(format!("{patient_id}.{format}.emb"))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    version: u64,
    patient_id: String,
    s: usize,
    d: usize,
}

pub fn write_embeddings(emb: &EmbeddingSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (s, d) = emb.vectors.dim();
    let header = EmbeddingHeader { version: EMBEDDING_VERSION, patient_id: emb.patient_id.clone(), s, d };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    for v in emb.vectors.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Loads a precomputed embedding file; the label is not stored in the file.
pub fn read_embeddings(path: impl AsRef<Path>, label: u8) -> Result<EmbeddingSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader { path: path.to_path_buf(), reason };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| malformed("no header line".into()))?;
    let header: EmbeddingHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| malformed(e.to_string()))?;
    if header.version != EMBEDDING_VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), found: header.version });
    }
    let payload = &bytes[nl + 1..];
    let expected = header.s * header.d;
    if payload.len() != expected * 4 {
        return Err(Error::ShapeMismatch { path: path.to_path_buf(), expected, found: payload.len() / 4 });
    }
    let values: Vec<f64> = payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
    let vectors = Array2::from_shape_vec((header.s, header.d), values).map_err(|e| malformed(e.to_string()))?;
    EmbeddingSequence::new(vectors, header.patient_id, label)
}
