//! Intensity preprocessing (normalisation, bias-field correction, cropping)
//! and the orchestration that turns a case into standardized network inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{acpc_frame, resample};
use crate::shape::{signed_distance, DEFAULT_SDF_CAP_MM};
use crate::synth::Case;
use crate::volume::{Geometry, Point3, Volume};

pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    ZscoreInMask,
    Minmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub crop_margin_vox: usize,
    pub bias_sigma_mm: f64,
    pub norm_mode: NormMode,
    pub target_dims: [usize; 3],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { crop_margin_vox: 1, bias_sigma_mm: 16.0, norm_mode: NormMode::ZscoreInMask, target_dims: [32; 3] }
    }
}

impl PipelineConfig {
    /// Pooling depth of the network; target dims must divide by `2^DEPTH`.
    pub const DEPTH: u32 = 2;

    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.bias_sigma_mm > 0.0) {
            errors.push(format!("pipeline.bias_sigma_mm must be positive, got {}", self.bias_sigma_mm));
        }
        let div = 1usize << Self::DEPTH;
        if self.target_dims.iter().any(|&d| d == 0 || d % div != 0) {
            errors.push(format!("pipeline.target_dims {:?} must be positive multiples of {div}", self.target_dims));
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

fn in_mask(mask: &Volume) -> Vec<bool> {
    mask.channel(0).iter().map(|&m| m > 0.5).collect()
}

fn masked_mean_std(values: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let n = count as f64;
    let mean = values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / n;
    let var = values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn normalize_intensity(vol: &Volume, mask: &Volume, mode: NormMode) -> Result<Volume> {
    vol.geometry().ensure_same(mask.geometry(), "normalize_intensity")?;
    let m = in_mask(mask);
    let data = vol.channel(0);
    match mode {
        NormMode::ZscoreInMask => {
            let (mean, std) = masked_mean_std(data, &m)?;
            let s = std.max(SIGMA_FLOOR);
            Ok(vol.map(|v| (v - mean) / s))
        }
        NormMode::Minmax => {
            let (lo, hi) = data.iter().zip(&m).filter(|(_, &k)| k).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                return Err(Error::EmptyMask);
            }
            let range = (hi - lo).max(SIGMA_FLOOR);
            let mut out = vol.clone();
            for (o, (&v, &k)) in out.data_mut().iter_mut().zip(data.iter().zip(&m)) {
                *o = if k { (v - lo) / range } else { 0.0 };
            }
            Ok(out)
        }
    }
}

/// Normalized 1D Gaussian taps for standard deviation `sigma_vox` (in voxels).
fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a scalar field with physical `sigma_mm`; taps past the border are dropped.
pub fn gaussian_blur(data: &[f64], geom: &Geometry, sigma_mm: f64) -> Vec<f64> {
    let dims = geom.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let k = gaussian_kernel(sigma_mm / geom.spacing[axis]);
        let r = (k.len() / 2) as isize;
        let len = dims[axis] as isize;
        let stride = strides[axis];
        for (i, o) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % dims[axis]) as isize;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let q = pos + t as isize - r;
                if q >= 0 && q < len {
                    acc += w * cur[base + q as usize * stride];
                }
            }
            *o = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Homomorphic bias correction: divide by the in-mask Gaussian-smoothed
/// image and rescale so the in-mask mean is preserved. Voxels outside the
/// mask are returned unchanged.
pub fn correct_bias(vol: &Volume, mask: &Volume, sigma_mm: f64) -> Result<Volume> {
    vol.geometry().ensure_same(mask.geometry(), "correct_bias")?;
    let m = in_mask(mask);
    let data = vol.channel(0);
    let (mean, _) = masked_mean_std(data, &m)?;
    let min_in = data.iter().zip(&m).filter(|(_, &k)| k).map(|(&v, _)| v).fold(f64::INFINITY, f64::min);
    let shift = if min_in > 0.0 { 0.0 } else { -min_in + 1e-6 * mean.abs().max(1.0) };
    let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();

    let geom = vol.geometry();
    let weights: Vec<f64> = m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let masked: Vec<f64> = shifted.iter().zip(&weights).map(|(v, w)| v * w).collect();
    let num = gaussian_blur(&masked, geom, sigma_mm);
    let den = gaussian_blur(&weights, geom, sigma_mm);

    let mut ratio = vec![0.0; data.len()];
    let mut sum_ratio = 0.0;
    let mut sum_orig = 0.0;
    for i in 0..data.len() {
        if m[i] {
            let bias = num[i] / den[i];
            ratio[i] = shifted[i] / bias;
            sum_ratio += ratio[i];
            sum_orig += shifted[i];
        }
    }
    let scale = sum_orig / sum_ratio;
    let mut out = vol.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate().take(data.len()) {
        if m[i] {
            *o = ratio[i] * scale - shift;
        }
    }
    Ok(out)
}

/// Start index (may be negative) of a `target_dims` window centered on the mask bounding box.
pub fn crop_window(mask: &Volume, margin: usize, target_dims: [usize; 3]) -> Result<[isize; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.channel(0).iter().enumerate() {
        if v > 0.5 {
            any = true;
            let p = mask.geometry().unravel(i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    let mut overflow = [0usize; 3];
    for a in 0..3 {
        let needed = hi[a] - lo[a] + 1 + 2 * margin;
        overflow[a] = needed.saturating_sub(target_dims[a]);
    }
    if overflow.iter().any(|&o| o > 0) {
        return Err(Error::BboxExceedsTarget { overflow });
    }
    Ok([0, 1, 2].map(|a| (lo[a] as isize + hi[a] as isize + 1 - target_dims[a] as isize).div_euclid(2)))
}

/// Extracts a window starting at voxel `start`; voxels outside the source become `fill`.
pub fn crop_with_window(vol: &Volume, start: [isize; 3], target_dims: [usize; 3], fill: f64) -> Result<Volume> {
    let g = vol.geometry();
    let origin = g.voxel_to_world([start[0] as f64, start[1] as f64, start[2] as f64]);
    let out_geom = Geometry::new(target_dims, g.spacing, origin, g.direction)?;
    let n_out = out_geom.n_voxels();
    let n_in = g.n_voxels();
    let mut data = vec![fill; n_out * vol.channels()];
    for c in 0..vol.channels() {
        for o in 0..n_out {
            let p = out_geom.unravel(o);
            let s = [0, 1, 2].map(|a| p[a] as isize + start[a]);
            if (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < g.dims[a]) {
                let i = g.linear_index(s[0] as usize, s[1] as usize, s[2] as usize);
                data[c * n_out + o] = vol.data()[c * n_in + i];
            }
        }
    }
    Volume::new(out_geom, vol.channels(), data)
}

/// Crops `vol` to `target_dims` around the mask bounding box, keeping world coordinates.
pub fn crop_to_mask(vol: &Volume, mask: &Volume, margin: usize, target_dims: [usize; 3]) -> Result<Volume> {
    vol.geometry().ensure_same(mask.geometry(), "crop_to_mask")?;
    let start = crop_window(mask, margin, target_dims)?;
    crop_with_window(vol, start, target_dims, 0.0)
}

/// Resamples `vol` into the AC-PC-IH frame defined by three landmarks.
pub fn reorient_acpc(vol: &Volume, ac: Point3, pc: Point3, ih: Point3, target: &Geometry) -> Result<Volume> {
    let frame = acpc_frame(ac, pc, ih)?;
    resample(vol, &frame, target)
}

/// Bias correction followed by normalisation, both restricted to `mask`.
pub fn prepare_intensity(vol: &Volume, mask: &Volume, cfg: &PipelineConfig) -> Result<Volume> {
    let corrected = correct_bias(vol, mask, cfg.bias_sigma_mm)?;
    normalize_intensity(&corrected, mask, cfg.norm_mode)
}

/// Standardizes a case for the network: intensity preprocessing of both MR
/// volumes, then an identical crop of every volume around the preoperative
/// brain mask. The SDF is recomputed on the cropped intraoperative mask.
pub fn standardize_case(case: &Case, cfg: &PipelineConfig) -> Result<Case> {
    let start = crop_window(&case.mask_pre, cfg.crop_margin_vox, cfg.target_dims)?;
    let dims = cfg.target_dims;
    let crop = |v: &Volume| crop_with_window(v, start, dims, 0.0);

    let pmri = prepare_intensity(&case.pmri, &case.mask_pre, cfg)?;
    let imri_mask = case.gt_mask_intra.clone();
    let imri = if imri_mask.channel(0).iter().any(|&v| v > 0.5) {
        prepare_intensity(&case.imri, &imri_mask, cfg)?
    } else {
        case.imri.clone()
    };
    let gt_mask_intra = crop(&case.gt_mask_intra)?;
    let gt_sdf = signed_distance(&gt_mask_intra, DEFAULT_SDF_CAP_MM);
    Ok(Case {
        pmri: crop(&pmri)?,
        imri: crop(&imri)?,
        half_mask: crop(&case.half_mask)?,
        mask_pre: crop(&case.mask_pre)?,
        gt_disp: crop(&case.gt_disp)?,
        gt_mask_intra,
        gt_sdf,
        landmarks_pre: case.landmarks_pre.clone(),
        landmarks_intra: case.landmarks_intra.clone(),
        frame_landmarks: case.frame_landmarks.clone(),
        side: case.side,
        seed: case.seed,
    })
}
