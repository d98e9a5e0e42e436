//! Scanner-noise images from adjacent-slice differences.
//!
//! Each pair of neighbouring slices is subtracted, the difference image is
//! tiled into non-overlapping square patches, patches whose histogram looks
//! like an anatomical boundary are discarded, and the survivors are averaged
//! into one small noise image per difference. Those images are then
//! upsampled with the windowed sinc and stacked into a noise volume.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::sinc_resize;
use crate::volume::Volume;

/// Response of the 3x3 Sobel kernel to a ramp of one unit per pixel.
pub const SOBEL_RAMP_GAIN: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub patch_size: usize,
    pub skew_tol: f64,
    pub kurtosis_center: f64,
    pub kurtosis_tol: f64,
    /// Exclusive upper bound on patch standard deviation (HU).
    pub std_max: f64,
    pub peak_bins: usize,
    pub peak_smooth_window: usize,
    pub peak_prominence_frac: f64,
    pub edge_fraction_max: f64,
    /// Gradient threshold in HU per pixel; Sobel responses are divided by
    /// [`SOBEL_RAMP_GAIN`] before comparison.
    pub edge_grad_threshold: f64,
    pub sinc_radius: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            patch_size: 30,
            skew_tol: 0.1,
            kurtosis_center: 3.0,
            kurtosis_tol: 0.5,
            std_max: 16.0,
            peak_bins: 32,
            peak_smooth_window: 5,
            peak_prominence_frac: 0.05,
            edge_fraction_max: 0.05,
            edge_grad_threshold: 30.0,
            sinc_radius: 3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("noise: {m}")));
        if self.patch_size < 4 {
            return bad("patch_size must be at least 4");
        }
        for (name, v) in [
            ("skew_tol", self.skew_tol),
            ("kurtosis_tol", self.kurtosis_tol),
            ("std_max", self.std_max),
            ("edge_grad_threshold", self.edge_grad_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [("peak_prominence_frac", self.peak_prominence_frac), ("edge_fraction_max", self.edge_fraction_max)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(&format!("{name} must lie in (0, 1)"));
            }
        }
        if self.peak_bins < 3 || self.peak_smooth_window == 0 || self.sinc_radius == 0 {
            return bad("peak_bins >= 3, peak_smooth_window >= 1 and sinc_radius >= 1 required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub peak_count: usize,
    pub edge_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    Skewness,
    Kurtosis,
    Std,
    Peaks,
    Edges,
}

/// `output[t-1] = I_t - I_{t-1}` for every adjacent slice pair.
pub fn difference_images(vol: &Volume) -> Result<Vec<Array2<f64>>> {
    let s = vol.slices();
    if s < 2 {
        return Err(Error::InsufficientSlices(s));
    }
    Ok((1..s)
        .map(|t| {
            let cur = vol.slice(t);
            let prev = vol.slice(t - 1);
            ndarray::Zip::from(&cur).and(&prev).map_collect(|&a, &b| f64::from(a) - f64::from(b))
        })
        .collect())
}

/// Gradient magnitude with the 3x3 Sobel pair, edges clamped.
pub fn sobel_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let at = |y: isize, x: isize| img[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Local maxima of the smoothed histogram whose topographic prominence is
/// at least `frac` of the tallest smoothed bin. The histogram is treated as
/// zero beyond both ends.
fn count_peaks(values: &[f64], bins: usize, window: usize, frac: f64) -> usize {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return 1;
    }
    let mut hist = vec![0.0f64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        hist[b] += 1.0;
    }
    let half = window / 2;
    let smooth: Vec<f64> = (0..bins)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half).min(bins - 1);
            hist[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect();
    let tallest = smooth.iter().cloned().fold(0.0, f64::max);
    let threshold = frac * tallest;
    let get = |i: isize| if i < 0 || i >= bins as isize { 0.0 } else { smooth[i as usize] };

    let mut count = 0;
    let mut i = 0usize;
    while i < bins {
        // plateau [i, j]
        let mut j = i;
        while j + 1 < bins && smooth[j + 1] == smooth[i] {
            j += 1;
        }
        let height = smooth[i];
        if height > get(i as isize - 1) && height > get(j as isize + 1) {
            let mut left_min = height;
            let mut k = i as isize - 1;
            loop {
                let v = get(k);
                if v > height {
                    break;
                }
                left_min = left_min.min(v);
                if k < 0 {
                    break;
                }
                k -= 1;
            }
            let mut right_min = height;
            let mut k = j as isize + 1;
            loop {
                let v = get(k);
                if v > height {
                    break;
                }
                right_min = right_min.min(v);
                if k >= bins as isize {
                    break;
                }
                k += 1;
            }
            if height - left_min.max(right_min) >= threshold {
                count += 1;
            }
        }
        i = j + 1;
    }
    count
}

/// First-order histogram statistics of one patch. `edge_map` is the raw
/// Sobel magnitude over the same pixels.
pub fn patch_stats(patch: ArrayView2<'_, f64>, cfg: &NoiseConfig, edge_map: ArrayView2<'_, f64>) -> PatchStats {
    let values: Vec<f64> = patch.iter().copied().collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in &values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let edges = edge_map
        .iter()
        .filter(|&&g| g / SOBEL_RAMP_GAIN > cfg.edge_grad_threshold)
        .count();
    let edge_fraction = edges as f64 / edge_map.len().max(1) as f64;
    if m2 <= 0.0 {
        return PatchStats { mean, std: 0.0, skewness: 0.0, kurtosis: 3.0, peak_count: 1, edge_fraction };
    }
    PatchStats {
        mean,
        std: m2.sqrt(),
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2),
        peak_count: count_peaks(&values, cfg.peak_bins, cfg.peak_smooth_window, cfg.peak_prominence_frac),
        edge_fraction,
    }
}

pub fn rejection_reasons(stats: &PatchStats, cfg: &NoiseConfig) -> Vec<Rejection> {
    let mut out = Vec::new();
    if stats.skewness.abs() > cfg.skew_tol {
        out.push(Rejection::Skewness);
    }
    if (stats.kurtosis - cfg.kurtosis_center).abs() > cfg.kurtosis_tol {
        out.push(Rejection::Kurtosis);
    }
    if !(stats.std < cfg.std_max) {
        out.push(Rejection::Std);
    }
    if stats.peak_count != 1 {
        out.push(Rejection::Peaks);
    }
    if stats.edge_fraction > cfg.edge_fraction_max {
        out.push(Rejection::Edges);
    }
    out
}

pub fn accept_patch(stats: &PatchStats, cfg: &NoiseConfig) -> bool {
    rejection_reasons(stats, cfg).is_empty()
}

/// Per-difference-image tally.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchTally {
    pub examined: usize,
    pub accepted: usize,
    pub rejections: BTreeMap<Rejection, usize>,
}

/// Averages the accepted patches of one difference image, returning `None`
/// when every patch is rejected.
pub fn noise_image(diff: &Array2<f64>, cfg: &NoiseConfig) -> Option<Array2<f64>> {
    noise_image_tallied(diff, cfg).0
}

pub fn noise_image_tallied(diff: &Array2<f64>, cfg: &NoiseConfig) -> (Option<Array2<f64>>, PatchTally) {
    let p = cfg.patch_size;
    let (h, w) = diff.dim();
    let mut tally = PatchTally::default();
    if h < p || w < p {
        return (None, tally);
    }
    let edges = sobel_magnitude(diff);
    let mut sum = Array2::<f64>::zeros((p, p));
    for by in 0..h / p {
        for bx in 0..w / p {
            let win = s![by * p..(by + 1) * p, bx * p..(bx + 1) * p];
            let patch = diff.slice(win);
            let stats = patch_stats(patch, cfg, edges.slice(win));
            tally.examined += 1;
            let reasons = rejection_reasons(&stats, cfg);
            if reasons.is_empty() {
                tally.accepted += 1;
                sum += &patch;
            } else {
                for r in reasons {
                    *tally.rejections.entry(r).or_default() += 1;
                }
            }
        }
    }
    if tally.accepted == 0 {
        return (None, tally);
    }
    sum /= tally.accepted as f64;
    (Some(sum), tally)
}

/// Diagnostics for one patient's noise extraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseDiagnostics {
    pub per_slice: Vec<PatchTally>,
    pub patches_examined: usize,
    pub patches_accepted: usize,
    pub slices_emitted: usize,
    pub rejections: BTreeMap<Rejection, usize>,
}

pub fn build_noise_volume(vol: &Volume, cfg: &NoiseConfig, target_hw: (usize, usize)) -> Result<Volume> {
    extract_noise(vol, cfg, target_hw).map(|(v, _)| v)
}

/// Noise volume plus per-slice patch diagnostics.
pub fn extract_noise(vol: &Volume, cfg: &NoiseConfig, target_hw: (usize, usize)) -> Result<(Volume, NoiseDiagnostics)> {
    cfg.validate()?;
    let diffs = difference_images(vol)?;
    let mut diag = NoiseDiagnostics::default();
    let mut slices = Vec::new();
    for diff in &diffs {
        let (img, tally) = noise_image_tallied(diff, cfg);
        diag.patches_examined += tally.examined;
        diag.patches_accepted += tally.accepted;
        for (r, c) in &tally.rejections {
            *diag.rejections.entry(*r).or_default() += c;
        }
        diag.per_slice.push(tally);
        if let Some(img) = img {
            let up = sinc_resize(&img, target_hw, cfg.sinc_radius);
            slices.push(up.mapv(|v| v as f32));
        }
    }
    diag.slices_emitted = slices.len();
    if slices.is_empty() {
        return Err(Error::NoNoiseContent);
    }
    let p = cfg.patch_size as f64;
    let scale = |n: usize, sp: f64| if n > 1 { sp * (p - 1.0) / (n - 1) as f64 } else { sp };
    let spacing = [vol.spacing[0], scale(target_hw.0, vol.spacing[1]), scale(target_hw.1, vol.spacing[2])];
    let mut data = ndarray::Array3::<f32>::zeros((slices.len(), target_hw.0, target_hw.1));
    for (t, img) in slices.iter().enumerate() {
        data.index_axis_mut(Axis(0), t).assign(img);
    }
    let out = Volume::new(data, spacing, "noise")?;
    Ok((out.with_stage(format!("noise(from: {})", vol.provenance)), diag))
}
