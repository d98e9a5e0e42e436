//! Scan preprocessing: isotropic resampling with a Lanczos-windowed sinc,
//! bilinear in-plane resizing, HU clipping and z-score normalization.
//!
//! The fixed order is resample, resize, clip, normalize. Normalization is
//! applied later than the rest because its statistics come from a training
//! split.

use ndarray::{Array2, Array3, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing_mm: f64,
    /// In-plane output size `(height, width)`.
    pub target_hw: (usize, usize),
    pub hu_clip: (f64, f64),
    /// Lobe count of the Lanczos window.
    pub sinc_radius: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_spacing_mm: 1.0, target_hw: (299, 299), hu_clip: (-300.0, 300.0), sinc_radius: 3 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing_mm.is_finite() && self.target_spacing_mm > 0.0) {
            return Err(Error::InvalidConfig("target_spacing_mm must be positive".into()));
        }
        if self.target_hw.0 < 8 || self.target_hw.1 < 8 {
            return Err(Error::InvalidConfig(format!("target_hw {:?} must be at least 8x8", self.target_hw)));
        }
        if !(self.hu_clip.0 < self.hu_clip.1) {
            return Err(Error::InvalidConfig(format!("hu_clip {:?} must satisfy lo < hi", self.hu_clip)));
        }
        if self.sinc_radius == 0 {
            return Err(Error::InvalidConfig("sinc_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pooled voxel statistics used for z-scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Lanczos kernel `sinc(x) * sinc(x / a)` on `|x| < a`.
pub fn lanczos(x: f64, a: usize) -> f64 {
    let a = a as f64;
    if x.abs() >= a {
        0.0
    } else {
        sinc(x) * sinc(x / a)
    }
}

/// Evaluates the windowed-sinc interpolant of `input` at fractional sample
/// positions. Samples beyond either end repeat the edge value.
pub fn sinc_interpolate(input: &[f64], positions: &[f64], radius: usize) -> Vec<f64> {
    let n = input.len() as isize;
    let r = radius as isize;
    positions
        .iter()
        .map(|&p| {
            let base = p.floor();
            if p == base && (0..n).contains(&(base as isize)) {
                return input[base as usize];
            }
            let base = base as isize;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for k in (base - r + 1)..=(base + r) {
                let wgt = lanczos(p - k as f64, radius);
                acc += wgt * input[k.clamp(0, n - 1) as usize];
                norm += wgt;
            }
            acc / norm
        })
        .collect()
}

/// Sample count and source positions for an axis moved to a new spacing,
/// keeping the physical extent.
fn axis_positions(n: usize, from_mm: f64, to_mm: f64) -> Vec<f64> {
    let extent = (n - 1) as f64 * from_mm;
    let n_out = (extent / to_mm + 1e-9).floor() as usize + 1;
    let step = to_mm / from_mm;
    (0..n_out).map(|j| j as f64 * step).collect()
}

/// Corner-aligned source positions for a resize from `n` to `n_out` samples.
fn aligned_positions(n: usize, n_out: usize) -> Vec<f64> {
    if n_out == 1 || n == 1 {
        return vec![0.0; n_out];
    }
    let scale = (n - 1) as f64 / (n_out - 1) as f64;
    (0..n_out).map(|j| j as f64 * scale).collect()
}

fn resample_axis(input: &Array3<f64>, axis: usize, positions: &[f64], radius: usize) -> Array3<f64> {
    let mut shape = input.raw_dim();
    shape[axis] = positions.len();
    let mut out = Array3::<f64>::zeros(shape);
    let mut line = Vec::with_capacity(input.shape()[axis]);
    for (src, mut dst) in input.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        line.clear();
        line.extend(src.iter().copied());
        for (d, v) in dst.iter_mut().zip(sinc_interpolate(&line, positions, radius)) {
            *d = v;
        }
    }
    out
}

const AXIS_NAMES: [&str; 3] = ["z", "y", "x"];

/// Resamples to isotropic `cfg.target_spacing_mm` voxels with a separable
/// Lanczos-windowed sinc.
pub fn resample_isotropic(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    vol.validate()?;
    cfg.validate()?;
    let t = cfg.target_spacing_mm;
    let mut data = vol.data.mapv(f64::from);
    for axis in 0..3 {
        let n = data.shape()[axis];
        let sp = vol.spacing[axis];
        if n == 1 {
            if sp > t {
                return Err(Error::DegenerateAxis { axis: AXIS_NAMES[axis] });
            }
            continue;
        }
        if (sp - t).abs() <= 1e-12 * t {
            continue;
        }
        let positions = axis_positions(n, sp, t);
        data = resample_axis(&data, axis, &positions, cfg.sinc_radius);
    }
    let out = Volume {
        data: data.mapv(|v| v as f32),
        spacing: [t; 3],
        provenance: vol.provenance.clone(),
    };
    Ok(out.with_stage(format!("resample(lanczos{},{t}mm)", cfg.sinc_radius)))
}

/// Bilinear interpolation of a single image with corner-aligned mapping.
pub fn bilinear_resize(img: &Array2<f64>, out_hw: (usize, usize)) -> Array2<f64> {
    let (h, w) = img.dim();
    let ys = aligned_positions(h, out_hw.0);
    let xs = aligned_positions(w, out_hw.1);
    Array2::from_shape_fn(out_hw, |(j, i)| {
        let (y, x) = (ys[j], xs[i]);
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Windowed-sinc upsampling of a single image with corner-aligned mapping.
pub fn sinc_resize(img: &Array2<f64>, out_hw: (usize, usize), radius: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let ys = aligned_positions(h, out_hw.0);
    let xs = aligned_positions(w, out_hw.1);
    let mut rows = Array2::<f64>::zeros((h, out_hw.1));
    let mut line = Vec::with_capacity(w.max(h));
    for (src, mut dst) in img.rows().into_iter().zip(rows.rows_mut()) {
        line.clear();
        line.extend(src.iter().copied());
        write_line(&mut dst, &sinc_interpolate(&line, &xs, radius));
    }
    let mut out = Array2::<f64>::zeros(out_hw);
    for (src, mut dst) in rows.columns().into_iter().zip(out.columns_mut()) {
        line.clear();
        line.extend(src.iter().copied());
        write_line(&mut dst, &sinc_interpolate(&line, &ys, radius));
    }
    out
}

fn write_line(dst: &mut ArrayViewMut1<'_, f64>, values: &[f64]) {
    for (d, v) in dst.iter_mut().zip(values) {
        *d = *v;
    }
}

/// Resizes every slice to `cfg.target_hw` by bilinear interpolation.
pub fn resize_slices(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    vol.validate()?;
    cfg.validate()?;
    let (s, h, w) = vol.data.dim();
    let (th, tw) = cfg.target_hw;
    let mut data = Array3::<f32>::zeros((s, th, tw));
    for t in 0..s {
        let img = vol.slice(t).mapv(f64::from);
        let resized = if (h, w) == (th, tw) { img } else { bilinear_resize(&img, (th, tw)) };
        data.index_axis_mut(Axis(0), t).assign(&resized.mapv(|v| v as f32));
    }
    let scale = |n: usize, n_out: usize, sp: f64| {
        if n > 1 && n_out > 1 {
            sp * (n - 1) as f64 / (n_out - 1) as f64
        } else {
            sp
        }
    };
    let spacing = [vol.spacing[0], scale(h, th, vol.spacing[1]), scale(w, tw, vol.spacing[2])];
    let out = Volume { data, spacing, provenance: vol.provenance.clone() };
    Ok(out.with_stage(format!("resize(bilinear,{th}x{tw})")))
}

/// Clamps voxels into the HU window without normalizing.
pub fn clip_hu(vol: &Volume, cfg: &PreprocessConfig) -> Volume {
    let (lo, hi) = (cfg.hu_clip.0 as f32, cfg.hu_clip.1 as f32);
    let out = Volume { data: vol.data.mapv(|v| v.clamp(lo, hi)), spacing: vol.spacing, provenance: vol.provenance.clone() };
    out.with_stage(format!("clip({},{})", cfg.hu_clip.0, cfg.hu_clip.1))
}

pub fn clip_and_normalize(vol: &Volume, cfg: &PreprocessConfig, stats: NormStats) -> Result<Volume> {
    if !(stats.std > 0.0) || !stats.std.is_finite() {
        return Err(Error::NonPositiveStd(stats.std));
    }
    if !stats.mean.is_finite() {
        return Err(Error::InvalidConfig("normalization mean is not finite".into()));
    }
    let (lo, hi) = cfg.hu_clip;
    let data = vol.data.mapv(|v| ((f64::from(v).clamp(lo, hi) - stats.mean) / stats.std) as f32);
    let out = Volume { data, spacing: vol.spacing, provenance: vol.provenance.clone() };
    Ok(out.with_stage(format!("normalize({},{})", stats.mean, stats.std)))
}

/// Maps a single HU value through clipping and normalization.
pub fn normalize_value(v: f64, cfg: &PreprocessConfig, stats: NormStats) -> f64 {
    (v.clamp(cfg.hu_clip.0, cfg.hu_clip.1) - stats.mean) / stats.std
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments { n, mean: self.mean + d * o.n / n, m2: self.m2 + o.m2 + d * d * self.n * o.n / n }
    }
}

/// Streaming form of [`compute_norm_stats`], one volume at a time.
#[derive(Default, Clone, Copy)]
pub struct NormAccumulator {
    total: Moments,
}

impl NormAccumulator {
    pub fn add(&mut self, vol: &Volume, cfg: &PreprocessConfig) {
        let (lo, hi) = cfg.hu_clip;
        let mut m = Moments::default();
        for &v in vol.data.iter() {
            m.push(f64::from(v).clamp(lo, hi));
        }
        self.total = self.total.merge(m);
    }

    pub fn finish(self) -> Result<NormStats> {
        if self.total.n == 0.0 {
            return Err(Error::InvalidConfig("no training volumes for normalization statistics".into()));
        }
        let var = self.total.m2 / self.total.n;
        if !(var > 0.0) {
            return Err(Error::ZeroVariance);
        }
        Ok(NormStats { mean: self.total.mean, std: var.sqrt() })
    }
}

/// Pooled mean and population standard deviation over every clipped voxel of
/// the training volumes.
pub fn compute_norm_stats(training: &[&Volume], cfg: &PreprocessConfig) -> Result<NormStats> {
    let mut acc = NormAccumulator::default();
    for vol in training {
        acc.add(vol, cfg);
    }
    acc.finish()
}

/// Runs the resample, resize and clip stages on a scan and, when given, its
/// mask. Masks follow the same interpolation and are re-binarized at 0.5.
pub fn preprocess_scan(vol: &Volume, mask: Option<&Mask>, cfg: &PreprocessConfig) -> Result<(Volume, Option<Mask>)> {
    if let Some(m) = mask {
        m.check_aligned(vol)?;
    }
    let out = clip_hu(&resize_slices(&resample_isotropic(vol, cfg)?, cfg)?, cfg);
    let mask = match mask {
        Some(m) => {
            let soft = resize_slices(&resample_isotropic(&m.to_volume(), cfg)?, cfg)?;
            Some(Mask::from_soft(&soft)?)
        }
        None => None,
    };
    Ok((out, mask))
}
