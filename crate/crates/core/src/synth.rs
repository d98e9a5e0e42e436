//! Seeded phantom datasets with a controllable lesion signal and
//! controllable acquisition confounds.
//!
//! Each phantom is a uniform soft-tissue block holding one ellipsoidal
//! organ. Positives carry a spherical lesion inside the organ. Gaussian
//! noise is added with a per-class sigma, so unequal sigmas give the
//! classes different noise texture and nothing else.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{write_manifest, write_mask, write_volume, Mask, ScanRecord, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrganConfig {
    /// Centre as a fraction of (slices, height, width).
    pub center_frac: [f64; 3],
    /// Uniform jitter of the centre, voxels.
    pub center_jitter: f64,
    /// Semi-axis ranges (z, y, x), voxels.
    pub radius_min: [f64; 3],
    pub radius_max: [f64; 3],
    pub intensity_hu: (f64, f64),
}

impl Default for OrganConfig {
    fn default() -> Self {
        OrganConfig {
            center_frac: [0.5, 0.3, 0.3],
            center_jitter: 1.5,
            radius_min: [4.5, 7.0, 7.0],
            radius_max: [6.0, 9.0, 9.0],
            intensity_hu: (110.0, 130.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionConfig {
    pub radius: (f64, f64),
    /// Added to the organ intensity inside the lesion; 0 disables the signal.
    pub contrast_hu: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        LesionConfig { radius: (2.5, 3.5), contrast_hu: 60.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_per_class: usize,
    pub slices: usize,
    pub hw: (usize, usize),
    pub spacing_mm: [f64; 3],
    pub background_hu: f64,
    pub organ: OrganConfig,
    pub lesion: LesionConfig,
    /// Noise sigma (HU) for (negatives, positives).
    pub noise_sigma: (f64, f64),
    /// Slice-count offsets for (negatives, positives).
    pub slice_count_skew: Option<(i64, i64)>,
    /// Write masks next to the volumes.
    pub emit_masks: bool,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_per_class: 40,
            slices: 16,
            hw: (64, 64),
            spacing_mm: [1.0; 3],
            background_hu: 40.0,
            organ: OrganConfig::default(),
            lesion: LesionConfig::default(),
            noise_sigma: (5.0, 5.0),
            slice_count_skew: None,
            emit_masks: true,
            id_prefix: "case".into(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn slices_for(&self, label: u8) -> usize {
        let offset = self.slice_count_skew.map_or(0, |(n, p)| if label == 1 { p } else { n });
        (self.slices as i64 + offset).max(0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let geo = |m: String| Err(Error::Geometry(m));
        if self.n_per_class == 0 {
            return Err(Error::InvalidConfig("synth: n_per_class must be at least 1".into()));
        }
        if self.slices < 8 {
            return Err(Error::InvalidConfig(format!("synth: slices must be at least 8, got {}", self.slices)));
        }
        if self.noise_sigma.0 < 0.0 || self.noise_sigma.1 < 0.0 {
            return Err(Error::InvalidConfig("synth: noise sigmas must be >= 0".into()));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("synth: spacing must be positive".into()));
        }
        let o = &self.organ;
        let (lo, hi) = self.lesion.radius;
        if !(0.0 < lo && lo <= hi) || (0..3).any(|a| !(0.0 < o.radius_min[a] && o.radius_min[a] <= o.radius_max[a])) {
            return geo("radius ranges must be positive and ordered".into());
        }
        let min_organ = o.radius_min.iter().copied().fold(f64::INFINITY, f64::min);
        if hi >= min_organ {
            return geo(format!("lesion radius {hi} does not fit inside organ radius {min_organ}"));
        }
        for label in [0, 1] {
            let dims = [self.slices_for(label), self.hw.0, self.hw.1];
            for a in 0..3 {
                let c = o.center_frac[a] * (dims[a] as f64 - 1.0);
                let reach = o.radius_max[a] + o.center_jitter;
                if c - reach < 0.0 || c + reach > dims[a] as f64 - 1.0 {
                    return geo(format!("organ reaches outside the grid on axis {a} (extent {})", dims[a]));
                }
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws one phantom. Geometry is drawn before noise, so the noise sigma
/// never changes the anatomy drawn from the same stream.
pub fn generate_phantom(cfg: &PhantomConfig, label: u8, rng: &mut ChaCha8Rng) -> Result<(Volume, Mask, u8)> {
    cfg.validate()?;
    if label > 1 {
        return Err(Error::InvalidConfig(format!("label {label} is not binary")));
    }
    let shape = (cfg.slices_for(label), cfg.hw.0, cfg.hw.1);
    let dims = [shape.0, shape.1, shape.2];
    let o = &cfg.organ;
    let mut center = [0.0; 3];
    let mut radii = [0.0; 3];
    for a in 0..3 {
        center[a] = o.center_frac[a] * (dims[a] as f64 - 1.0) + rng.random_range(-1.0..=1.0) * o.center_jitter;
        radii[a] = uniform(rng, (o.radius_min[a], o.radius_max[a]));
    }
    let organ_hu = uniform(rng, o.intensity_hu);
    let lesion_r = uniform(rng, cfg.lesion.radius);
    // lesion centre uniform in the organ shrunk by the lesion radius
    let offset = loop {
        let u: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            break [0, 1, 2].map(|a| u[a] * (radii[a] - lesion_r));
        }
    };
    let lesion_c = [0, 1, 2].map(|a| center[a] + offset[a]);
    let has_lesion = label == 1 && cfg.lesion.contrast_hu != 0.0;

    let mut data = Array3::<f32>::from_elem(shape, cfg.background_hu as f32);
    let mut mask = Array3::<u8>::zeros(shape);
    for ((z, y, x), v) in data.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        let e: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
        if e <= 1.0 {
            mask[[z, y, x]] = 1;
            *v = organ_hu as f32;
            let d2: f64 = (0..3).map(|a| (p[a] - lesion_c[a]).powi(2)).sum();
            if has_lesion && d2 <= lesion_r * lesion_r {
                *v += cfg.lesion.contrast_hu as f32;
            }
        }
    }
    let sigma = if label == 1 { cfg.noise_sigma.1 } else { cfg.noise_sigma.0 };
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        data.mapv_inplace(|v| v + n.sample(rng) as f32);
    }
    let vol = Volume::new(data, cfg.spacing_mm, format!("synth(seed={}, label={label})", cfg.seed))?;
    let mask = Mask::new(mask, cfg.spacing_mm)?;
    if mask.count() == 0 {
        return Err(Error::Geometry("organ covers no voxel".into()));
    }
    Ok((vol, mask, label))
}

/// Independent stream for phantom `index` of a dataset.
pub fn phantom_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn patient_id(cfg: &PhantomConfig, index: usize) -> String {
    format!("{}{index:04}", cfg.id_prefix)
}

/// Writes `n_per_class` negatives then `n_per_class` positives, plus
/// `manifest.json` and `phantom_config.json`, into `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, out_dir: &Path) -> Result<Vec<ScanRecord>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n = cfg.n_per_class;
    let records: Vec<ScanRecord> = (0..2 * n)
        .into_par_iter()
        .map(|i| {
            let label = u8::from(i >= n);
            let (vol, mask, _) = generate_phantom(cfg, label, &mut phantom_rng(cfg.seed, i))?;
            let id = patient_id(cfg, i);
            let volume_path = out_dir.join(format!("{id}.vol"));
            write_volume(&vol, &volume_path)?;
            let mask_path = if cfg.emit_masks {
                let p = out_dir.join(format!("{id}.mask.vol"));
                write_mask(&mask, &p)?;
                Some(p)
            } else {
                None
            };
            Ok(ScanRecord { patient_id: id, label, volume_path, mask_path })
        })
        .collect::<Result<_>>()?;
    // relative paths keep the manifest independent of where the dataset lives
    let relative: Vec<ScanRecord> = records
        .iter()
        .map(|r| ScanRecord {
            volume_path: r.volume_path.file_name().expect("file").into(),
            mask_path: r.mask_path.as_ref().map(|m| m.file_name().expect("file").into()),
            ..r.clone()
        })
        .collect();
    write_manifest(&relative, out_dir.join("manifest.json"))?;
    let cfg_path = out_dir.join("phantom_config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(&cfg_path, e))?;
    fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn small() -> PhantomConfig {
        PhantomConfig { n_per_class: 3, hw: (48, 48), ..Default::default() }
    }

    #[test]
    fn same_seed_same_phantom() {
        let cfg = small();
        let a = generate_phantom(&cfg, 1, &mut phantom_rng(7, 0)).unwrap();
        let b = generate_phantom(&cfg, 1, &mut phantom_rng(7, 0)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&cfg, 1, &mut phantom_rng(7, 1)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn mask_is_nonempty_and_covers_lesion() {
        let cfg = PhantomConfig { noise_sigma: (0.0, 0.0), ..small() };
        for i in 0..10 {
            let (vol, mask, _) = generate_phantom(&cfg, 1, &mut phantom_rng(3, i)).unwrap();
            assert!(mask.count() > 0);
            let organ_hu = vol.data.iter().zip(mask.data.iter()).filter(|(_, &m)| m == 1).map(|(&v, _)| v).fold(f32::INFINITY, f32::min);
            for (&v, &m) in vol.data.iter().zip(mask.data.iter()) {
                if m == 0 {
                    assert_eq!(v, 40.0);
                }
                if v > organ_hu {
                    assert_eq!(m, 1, "lesion voxel outside the mask");
                }
            }
            assert!(vol.data.iter().any(|&v| v > organ_hu), "lesion has no voxel");
        }
    }

    #[test]
    fn geometry_that_does_not_fit() {
        let mut cfg = small();
        cfg.organ.radius_max = [6.0, 40.0, 9.0];
        assert!(matches!(generate_phantom(&cfg, 0, &mut phantom_rng(0, 0)), Err(Error::Geometry(_))));
        let mut cfg = small();
        cfg.lesion.radius = (2.0, 8.0);
        assert!(matches!(cfg.validate(), Err(Error::Geometry(_))));
        let cfg = PhantomConfig { slice_count_skew: Some((0, -6)), ..small() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn slice_count_skew_applies_per_class() {
        let cfg = PhantomConfig { slice_count_skew: Some((0, 2)), ..small() };
        assert_eq!(generate_phantom(&cfg, 0, &mut phantom_rng(0, 0)).unwrap().0.slices(), 16);
        assert_eq!(generate_phantom(&cfg, 1, &mut phantom_rng(0, 1)).unwrap().0.slices(), 18);
    }

    #[test]
    fn no_signal_means_indistinguishable_classes() {
        let cfg = PhantomConfig { lesion: LesionConfig { contrast_hu: 0.0, ..Default::default() }, ..small() };
        let means = |label: u8, offset: usize| -> Vec<f64> {
            (0..50)
                .map(|i| {
                    let (v, _, _) = generate_phantom(&cfg, label, &mut phantom_rng(11, offset + i)).unwrap();
                    v.data.iter().map(|&x| f64::from(x)).sum::<f64>() / v.data.len() as f64
                })
                .collect()
        };
        let (a, b) = (means(0, 0), means(1, 50));
        // Welch two-sample t test
        let mv = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64)
        };
        let ((ma, va), (mb, vb)) = (mv(&a), mv(&b));
        let (sa, sb) = (va / 50.0, vb / 50.0);
        let t = (ma - mb) / (sa + sb).sqrt();
        let df = (sa + sb).powi(2) / (sa * sa / 49.0 + sb * sb / 49.0);
        let p = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().sf(t.abs());
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn dataset_is_balanced_and_reproducible() {
        let cfg = small();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let recs = generate_dataset(&cfg, d1.path()).unwrap();
        generate_dataset(&cfg, d2.path()).unwrap();
        assert_eq!(recs.len(), 6);
        assert_eq!(recs.iter().filter(|r| r.label == 1).count(), 3);
        for r in &recs {
            let v = crate::volume::read_volume(&r.volume_path).unwrap();
            let m = crate::volume::read_mask(r.mask_path.as_ref().unwrap()).unwrap();
            m.check_aligned(&v).unwrap();
        }
        let mut names: Vec<_> = fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 6 * 2 + 2);
        for name in names {
            assert_eq!(fs::read(d1.path().join(&name)).unwrap(), fs::read(d2.path().join(&name)).unwrap(), "{name:?}");
        }
    }
}
