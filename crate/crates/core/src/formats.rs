//! The four sanity-test input formats built from one scan.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{extract_noise, NoiseConfig, NoiseDiagnostics};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    Original,
    TargetOnly,
    TargetRemoved,
    Noise,
}

impl InputFormat {
    pub const ALL: [InputFormat; 4] =
        [InputFormat::Original, InputFormat::TargetOnly, InputFormat::TargetRemoved, InputFormat::Noise];

    pub fn as_str(self) -> &'static str {
        match self {
            InputFormat::Original => "original",
            InputFormat::TargetOnly => "target_only",
            InputFormat::TargetRemoved => "target_removed",
            InputFormat::Noise => "noise",
        }
    }

    /// Formats that need a segmentation mask.
    pub fn needs_mask(self) -> bool {
        matches!(self, InputFormat::TargetOnly | InputFormat::TargetRemoved)
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown input format {s:?}")))
    }
}

/// `<dir>/<patient_id>.<format>.vol`
pub fn format_path(dir: &Path, patient_id: &str, format: InputFormat) -> PathBuf {
    dir.join(format!("{patient_id}.{format}.vol"))
}

pub type FormatSet = BTreeMap<InputFormat, Volume>;

fn fill_outside(vol: &Volume, mask: &Mask, fill: f32) -> Array3<f32> {
    Zip::from(&vol.data).and(&mask.data).map_collect(|&v, &m| if m == 1 { v } else { fill })
}

/// Indices of slices holding at least one mask voxel.
pub fn retained_slices(mask: &Mask) -> Vec<usize> {
    mask.data
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, s)| s.iter().any(|&m| m == 1))
        .map(|(t, _)| t)
        .collect()
}

/// Keeps only masked voxels, dropping slices without any.
pub fn make_target_only(vol: &Volume, mask: &Mask, fill: f32) -> Result<Volume> {
    mask.check_aligned(vol)?;
    let keep = retained_slices(mask);
    if keep.is_empty() {
        return Err(Error::EmptyMask);
    }
    let filled = fill_outside(vol, mask, fill);
    let data = filled.select(Axis(0), &keep);
    let out = Volume { data, spacing: vol.spacing, provenance: vol.provenance.clone() };
    Ok(out.with_stage(format!("target_only(fill={fill})")))
}

/// Replaces masked voxels with `fill`, keeping every slice.
pub fn make_target_removed(vol: &Volume, mask: &Mask, fill: f32) -> Result<Volume> {
    mask.check_aligned(vol)?;
    let data = Zip::from(&vol.data).and(&mask.data).map_collect(|&v, &m| if m == 1 { fill } else { v });
    let out = Volume { data, spacing: vol.spacing, provenance: vol.provenance.clone() };
    Ok(out.with_stage(format!("target_removed(fill={fill})")))
}

/// Builds every format the inputs allow. Without a mask only `Original`
/// and `Noise` are produced.
pub fn build_format_set(vol: &Volume, mask: Option<&Mask>, noise_cfg: &NoiseConfig, fill: f32) -> Result<FormatSet> {
    build_format_set_with_diagnostics(vol, mask, noise_cfg, fill).map(|(set, _)| set)
}

pub fn build_format_set_with_diagnostics(
    vol: &Volume,
    mask: Option<&Mask>,
    noise_cfg: &NoiseConfig,
    fill: f32,
) -> Result<(FormatSet, NoiseDiagnostics)> {
    let mut set = FormatSet::new();
    set.insert(InputFormat::Original, vol.clone());
    if let Some(mask) = mask {
        let only = make_target_only(vol, mask, fill).map_err(|e| e.in_format(InputFormat::TargetOnly))?;
        let removed = make_target_removed(vol, mask, fill).map_err(|e| e.in_format(InputFormat::TargetRemoved))?;
        set.insert(InputFormat::TargetOnly, only);
        set.insert(InputFormat::TargetRemoved, removed);
    }
    let (noise, diag) = extract_noise(vol, noise_cfg, vol.hw()).map_err(|e| e.in_format(InputFormat::Noise))?;
    set.insert(InputFormat::Noise, noise);
    Ok((set, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FILL: f32 = -300.0;

    fn random_case(seed: u64, shape: (usize, usize, usize), density: f64) -> (Volume, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn(shape, |_| rng.random_range(-250.0f32..250.0));
        let mask = Array3::from_shape_fn(shape, |_| u8::from(rng.random_bool(density)));
        (Volume::new(data, [1.0; 3], "t").unwrap(), Mask::new(mask, [1.0; 3]).unwrap())
    }

    #[test]
    fn format_names() {
        for f in InputFormat::ALL {
            assert_eq!(f.as_str().parse::<InputFormat>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.as_str()));
        }
        assert!("pancreas".parse::<InputFormat>().is_err());
    }

    #[test]
    fn full_mask_and_single_voxel() {
        let (vol, _) = random_case(1, (3, 5, 5), 0.5);
        let full = Mask::new(Array3::ones((3, 5, 5)), [1.0; 3]).unwrap();
        assert_eq!(make_target_only(&vol, &full, FILL).unwrap().data, vol.data);
        assert!(make_target_removed(&vol, &full, FILL).unwrap().data.iter().all(|&v| v == FILL));

        let mut one = Array3::zeros((3, 5, 5));
        one[[1, 2, 2]] = 1;
        let out = make_target_only(&vol, &Mask::new(one, [1.0; 3]).unwrap(), FILL).unwrap();
        assert_eq!(out.data.dim(), (1, 5, 5));
        for ((_, y, x), &v) in out.data.indexed_iter() {
            if (y, x) == (2, 2) {
                assert_eq!(v, vol.data[[1, 2, 2]]);
            } else {
                assert_eq!(v, FILL);
            }
        }
    }

    #[test]
    fn empty_mask_behaviour() {
        let (vol, _) = random_case(2, (2, 4, 4), 0.5);
        let empty = Mask::new(Array3::zeros((2, 4, 4)), [1.0; 3]).unwrap();
        assert!(matches!(make_target_only(&vol, &empty, FILL), Err(Error::EmptyMask)));
        assert_eq!(make_target_removed(&vol, &empty, FILL).unwrap().data, vol.data);
    }

    #[test]
    fn target_only_matches_voxel_loop() {
        let (vol, mask) = random_case(3, (6, 7, 8), 0.1);
        let out = make_target_only(&vol, &mask, FILL).unwrap();
        let keep = retained_slices(&mask);
        assert_eq!(out.slices(), keep.len());
        for (i, &t) in keep.iter().enumerate() {
            for y in 0..7 {
                for x in 0..8 {
                    let want = if mask.data[[t, y, x]] == 1 { vol.data[[t, y, x]] } else { FILL };
                    assert_eq!(out.data[[i, y, x]], want);
                }
            }
        }
    }

    #[test]
    fn misaligned_mask_rejected() {
        let (vol, _) = random_case(4, (2, 4, 4), 0.5);
        let m = Mask::new(Array3::ones((2, 4, 5)), [1.0; 3]).unwrap();
        assert!(make_target_removed(&vol, &m, FILL).is_err());
    }

    #[test]
    fn format_set_members() {
        let data = Array3::from_shape_fn((6, 64, 64), |(z, y, x)| ((y * 3 + x) % 5 + z) as f32);
        let vol = Volume::new(data, [1.0; 3], "p").unwrap();
        let mask = Mask::new(Array3::from_shape_fn((6, 64, 64), |(z, y, x)| u8::from(z > 1 && y > 20 && x > 20)), [1.0; 3]).unwrap();
        let cfg = NoiseConfig::default();
        let set = build_format_set(&vol, Some(&mask), &cfg, FILL).unwrap();
        assert_eq!(set.keys().copied().collect::<Vec<_>>(), InputFormat::ALL.to_vec());
        assert_eq!(set[&InputFormat::Original], vol);
        assert!(set[&InputFormat::TargetOnly].slices() <= vol.slices());
        assert_eq!(set[&InputFormat::TargetRemoved].slices(), vol.slices());
        for v in set.values() {
            assert_eq!(v.hw(), (64, 64));
        }

        let set = build_format_set(&vol, None, &cfg, FILL).unwrap();
        assert_eq!(set.keys().copied().collect::<Vec<_>>(), vec![InputFormat::Original, InputFormat::Noise]);

        let thin = Volume::new(Array3::zeros((1, 64, 64)), [1.0; 3], "p").unwrap();
        let err = build_format_set(&thin, None, &cfg, FILL).unwrap_err();
        assert!(matches!(err, Error::Format { ref format, .. } if format == "noise"), "{err}");
    }

    proptest! {
        #[test]
        fn formats_partition_voxels(seed in 0u64..1000, density in 0.05f64..0.95) {
            let (vol, mask) = random_case(seed, (3, 6, 5), density);
            let only = fill_outside(&vol, &mask, FILL);
            let removed = make_target_removed(&vol, &mask, FILL).unwrap();
            for (idx, &v) in vol.data.indexed_iter() {
                let kept_in_only = only[idx] == v && mask.data[idx] == 1;
                let kept_in_removed = removed.data[idx] == v && mask.data[idx] == 0;
                prop_assert!(kept_in_only ^ kept_in_removed);
                prop_assert!(only[idx] == v || only[idx] == FILL);
                prop_assert!(removed.data[idx] == v || removed.data[idx] == FILL);
            }
        }

        #[test]
        fn formats_are_idempotent(seed in 0u64..1000) {
            let (vol, mask) = random_case(seed, (4, 5, 5), 0.3);
            let removed = make_target_removed(&vol, &mask, FILL).unwrap();
            prop_assert_eq!(&make_target_removed(&removed, &mask, FILL).unwrap().data, &removed.data);
            if let Ok(only) = make_target_only(&vol, &mask, FILL) {
                let keep = retained_slices(&mask);
                let cropped = Mask::new(mask.data.select(Axis(0), &keep), mask.spacing).unwrap();
                prop_assert_eq!(&make_target_only(&only, &cropped, FILL).unwrap().data, &only.data);
            }
        }
    }
}
