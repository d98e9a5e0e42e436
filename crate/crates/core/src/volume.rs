//! Volume and mask data model plus the on-disk container.
//!
//! A container file is a single-line UTF-8 JSON header followed by a raw
//! little-endian `f32` payload, slice-major then row-major. Masks share the
//! container with `binary_mask: true`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u64 = 1;

/// Voxel spacing in millimetres, ordered `(z, y, x)`.
pub type Spacing = [f64; 3];

/// A scalar volume of shape `(slices, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: Spacing,
    pub provenance: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Spacing, provenance: impl Into<String>) -> Result<Self> {
        let vol = Volume { data, spacing, provenance: provenance.into() };
        vol.validate()?;
        Ok(vol)
    }

    pub fn validate(&self) -> Result<()> {
        validate_spacing(self.spacing)?;
        let (s, h, w) = self.data.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidVolume(format!("empty shape {s}x{h}x{w}")));
        }
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite voxel at flat index {idx}")));
        }
        Ok(())
    }

    pub fn slices(&self) -> usize {
        self.data.dim().0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn slice(&self, t: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), t)
    }

    /// Appends a pipeline stage tag to the provenance string.
    pub fn with_stage(mut self, stage: impl AsRef<str>) -> Self {
        if self.provenance.is_empty() {
            self.provenance = stage.as_ref().to_string();
        } else {
            self.provenance = format!("{} | {}", self.provenance, stage.as_ref());
        }
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.provenance.split(" | ").any(|s| s.starts_with("normalize"))
    }

    /// Builds a volume by stacking equally sized 2D images.
    pub fn from_slices(slices: &[Array2<f32>], spacing: Spacing, provenance: impl Into<String>) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidVolume("no slices to stack".into()))?;
        let (h, w) = first.dim();
        let mut data = Array3::<f32>::zeros((slices.len(), h, w));
        for (t, img) in slices.iter().enumerate() {
            if img.dim() != (h, w) {
                return Err(Error::InvalidVolume(format!(
                    "slice {t} is {:?}, expected {:?}",
                    img.dim(),
                    (h, w)
                )));
            }
            data.index_axis_mut(Axis(0), t).assign(img);
        }
        Volume::new(data, spacing, provenance)
    }
}

/// Binary target mask aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Array3<u8>,
    pub spacing: Spacing,
}

impl Mask {
    pub fn new(data: Array3<u8>, spacing: Spacing) -> Result<Self> {
        validate_spacing(spacing)?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::MaskMismatch("mask values must be 0 or 1".into()));
        }
        Ok(Mask { data, spacing })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn check_aligned(&self, vol: &Volume) -> Result<()> {
        if self.data.dim() != vol.data.dim() {
            return Err(Error::MaskMismatch(format!(
                "mask shape {:?} vs volume shape {:?}",
                self.data.dim(),
                vol.data.dim()
            )));
        }
        let close = self
            .spacing
            .iter()
            .zip(vol.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
        if !close {
            return Err(Error::MaskMismatch(format!(
                "mask spacing {:?} vs volume spacing {:?}",
                self.spacing, vol.spacing
            )));
        }
        Ok(())
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            data: self.data.mapv(f32::from),
            spacing: self.spacing,
            provenance: "mask".into(),
        }
    }

    /// Binarizes an interpolated mask at 0.5.
    pub fn from_soft(vol: &Volume) -> Result<Self> {
        Mask::new(vol.data.mapv(|v| u8::from(v >= 0.5)), vol.spacing)
    }
}

fn validate_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u64,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    binary_mask: bool,
    provenance: String,
}

/// Encodes a volume as container bytes.
pub fn encode_container(data: &Array3<f32>, spacing: Spacing, binary_mask: bool, provenance: &str) -> Vec<u8> {
    let (s, h, w) = data.dim();
    let header = Header {
        version: CONTAINER_VERSION,
        shape: [s, h, w],
        spacing_mm: spacing,
        dtype: "f32".into(),
        binary_mask,
        provenance: provenance.to_string(),
    };
    let mut buf = serde_json::to_vec(&header).expect("header serializes");
    buf.push(b'\n');
    buf.reserve(s * h * w * 4);
    for v in data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_container(bytes: &[u8], path: &Path) -> Result<(Header, Array3<f32>)> {
    let malformed = |reason: &str| Error::MalformedHeader { path: path.to_path_buf(), reason: reason.to_string() };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("no header terminator"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| malformed(&e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| malformed("missing version"))?;
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), found: version });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| malformed(&e.to_string()))?;
    if header.dtype != "f32" {
        return Err(malformed(&format!("unsupported dtype {:?}", header.dtype)));
    }
    let payload = &bytes[nl + 1..];
    let [s, h, w] = header.shape;
    let expected = s * h * w;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(Error::ShapeMismatch { path: path.to_path_buf(), expected, found: payload.len() / 4 });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array3::from_shape_vec((s, h, w), values).map_err(|e| malformed(&e.to_string()))?;
    Ok((header, data))
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_container(&vol.data, vol.spacing, false, &vol.provenance))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, data) = decode_container(&bytes, path)?;
    let vol = Volume { data, spacing: header.spacing_mm, provenance: header.provenance };
    vol.validate()?;
    Ok(vol)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let data = mask.data.mapv(f32::from);
    write_bytes(path.as_ref(), &encode_container(&data, mask.spacing, true, "mask"))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, data) = decode_container(&bytes, path)?;
    if !header.binary_mask {
        return Err(Error::MalformedHeader { path: path.to_path_buf(), reason: "not flagged as a binary mask".into() });
    }
    if data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::MaskMismatch(format!("{} holds non-binary values", path.display())));
    }
    Mask::new(data.mapv(|v| v as u8), header.spacing_mm)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanRecord {
    pub patient_id: String,
    pub label: u8,
    pub volume_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ScanRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<ScanRecord> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &mut records {
        if r.volume_path.is_relative() {
            r.volume_path = base.join(&r.volume_path);
        }
        if let Some(m) = r.mask_path.as_mut() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
    }
    validate_manifest(&records)?;
    Ok(records)
}

pub fn validate_manifest(records: &[ScanRecord]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if r.label > 1 {
            return Err(Error::InvalidConfig(format!("patient {} has label {}", r.patient_id, r.label)));
        }
        if !seen.insert(r.patient_id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate patient_id {}", r.patient_id)));
        }
    }
    Ok(())
}

pub fn write_manifest(records: &[ScanRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    validate_manifest(records)?;
    let text = serde_json::to_string_pretty(records).map_err(|e| Error::json(path, e))?;
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample() -> Volume {
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f32 * 0.37 - 9.0);
        Volume::new(data, [2.5, 0.7, 0.8], "test").unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let v = sample();
        write_volume(&v, &p).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let data = Array3::<f32>::zeros((10, 2, 2));
        let mut bytes = encode_container(&data, [1.0; 3], false, "");
        bytes.truncate(bytes.len() - 16);
        fs::write(&p, bytes).unwrap();
        match read_volume(&p) {
            Err(Error::ShapeMismatch { expected: 40, found: 36, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        fs::write(&p, b"{\"version\":7,\"shape\":[1,1,1]}\n\0\0\0\0").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnsupportedVersion { found: 7, .. })));
    }

    #[test]
    fn garbage_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        fs::write(&p, b"not json\n").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::MalformedHeader { .. })));
        fs::write(&p, b"no newline at all").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn mask_round_trip_and_flag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vol");
        let m = Mask::new(Array3::from_shape_fn((2, 3, 3), |(z, y, x)| ((z + y + x) % 2) as u8), [1.0; 3]).unwrap();
        write_mask(&m, &p).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
        // a plain volume is not accepted as a mask
        write_volume(&sample(), &p).unwrap();
        assert!(read_mask(&p).is_err());
    }

    #[test]
    fn invalid_volumes_rejected() {
        assert!(Volume::new(Array3::zeros((1, 2, 2)), [0.0, 1.0, 1.0], "").is_err());
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3], "").is_err());
        let mut d = Array3::zeros((1, 2, 2));
        d[[0, 1, 1]] = f32::NAN;
        assert!(Volume::new(d, [1.0; 3], "").is_err());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let r = ScanRecord { patient_id: "p".into(), label: 0, volume_path: "a".into(), mask_path: None };
        assert!(validate_manifest(&[r.clone(), r]).is_err());
    }

    #[test]
    fn provenance_stages_accumulate() {
        let v = sample().with_stage("clip").with_stage("normalize(0,1)");
        assert_eq!(v.provenance, "test | clip | normalize(0,1)");
        assert!(v.is_normalized());
    }
}
