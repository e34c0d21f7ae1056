//! Mask geometry: exact signed Euclidean distance and cube dilation.

use crate::volume::Volume;

pub const DEFAULT_SDF_CAP_MM: f64 = 20.0;

/// Signed distance (mm) between voxel centers: negative inside the mask
/// (distance to the nearest background voxel), positive outside (distance to
/// the nearest foreground voxel), magnitudes clamped to `cap_mm`.
///
/// Voxels are foreground when their value exceeds 0.5. Only the first
/// channel is used.
pub fn signed_distance(mask: &Volume, cap_mm: f64) -> Volume {
    let n = mask.n_voxels();
    let fg: Vec<bool> = mask.channel(0).iter().map(|&v| v > 0.5).collect();
    let dims = mask.dims();
    let spacing = mask.geometry().spacing;

    let to_fg = squared_edt(&fg, dims, spacing);
    let bg: Vec<bool> = fg.iter().map(|&f| !f).collect();
    let to_bg = squared_edt(&bg, dims, spacing);

    let mut out = vec![0.0; n];
    for i in 0..n {
        out[i] = if fg[i] { -to_bg[i].sqrt().min(cap_mm) } else { to_fg[i].sqrt().min(cap_mm) };
    }
    Volume::new(mask.geometry().clone(), 1, out).expect("same geometry")
}

/// Squared distance (mm²) from every voxel center to the nearest `feature`
/// voxel center, `inf` when there are no features. Separable lower-envelope
/// algorithm, one pass per axis.
pub fn squared_edt(feature: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { f64::INFINITY }).collect();
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let max_len = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_len];
    let mut out = vec![0.0; max_len];
    let mut scratch = EnvelopeScratch::new(max_len);

    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let h = spacing[axis];
        let (o1, o2) = match axis {
            0 => ((ny, nx), (nz, nx * ny)),
            1 => ((nx, 1), (nz, nx * ny)),
            _ => ((nx, 1), (ny, nx)),
        };
        for b in 0..o2.0 {
            for a in 0..o1.0 {
                let start = a * o1.1 + b * o2.1;
                for (q, v) in line[..len].iter_mut().enumerate() {
                    *v = d[start + q * stride];
                }
                lower_envelope(&line[..len], h, &mut out[..len], &mut scratch);
                for (q, v) in out[..len].iter().enumerate() {
                    d[start + q * stride] = *v;
                }
            }
        }
    }
    d
}

struct EnvelopeScratch {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        EnvelopeScratch { v: vec![0; n], z: vec![0.0; n + 1] }
    }
}

/// 1D squared distance transform `out[p] = min_q f[q] + ((p - q) h)²`.
fn lower_envelope(f: &[f64], h: f64, out: &mut [f64], s: &mut EnvelopeScratch) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if k < 0 {
            k = 0;
            s.v[0] = q;
            s.z[0] = f64::NEG_INFINITY;
            s.z[1] = f64::INFINITY;
            continue;
        }
        loop {
            let r = s.v[k as usize];
            let (pq, pr) = (pos(q), pos(r));
            let x = ((f[q] + pq * pq) - (f[r] + pr * pr)) / (2.0 * (pq - pr));
            if x <= s.z[k as usize] {
                k -= 1;
                if k < 0 {
                    break;
                }
            } else {
                k += 1;
                s.v[k as usize] = q;
                s.z[k as usize] = x;
                s.z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            k = 0;
            s.v[0] = q;
            s.z[0] = f64::NEG_INFINITY;
            s.z[1] = f64::INFINITY;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        let x = pos(p);
        while s.z[j + 1] < x {
            j += 1;
        }
        let r = s.v[j];
        let dx = x - pos(r);
        *o = dx * dx + f[r];
    }
}

/// Max over the (2k+1)³ neighborhood of each voxel, with the window clipped at the border.
pub fn dilate(mask: &Volume, k: usize) -> Volume {
    let mut out = mask.clone();
    let n = mask.n_voxels();
    for c in 0..mask.channels() {
        let (vals, _) = dilate_with_argmax(&mask.data()[c * n..(c + 1) * n], mask.dims(), k);
        out.channel_mut(c).copy_from_slice(&vals);
    }
    out
}

/// Windowed max plus, for every voxel, the linear index that attains it.
/// Ties go to the lowest linear index.
pub fn dilate_with_argmax(data: &[f64], dims: [usize; 3], k: usize) -> (Vec<f64>, Vec<usize>) {
    let n = data.len();
    let mut vals = data.to_vec();
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 {
        return (vals, idx);
    }
    let [nx, ny, _] = dims;
    let strides = [1, nx, nx * ny];
    let mut nv = vec![0.0; n];
    let mut ni = vec![0usize; n];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for i in 0..n {
            let pos = (i / stride) % len;
            let lo = pos.saturating_sub(k);
            let hi = (pos + k).min(len - 1);
            let base = i - pos * stride;
            let mut bv = f64::NEG_INFINITY;
            let mut bi = usize::MAX;
            for q in lo..=hi {
                let j = base + q * stride;
                let (v, id) = (vals[j], idx[j]);
                if v > bv || (v == bv && id < bi) {
                    bv = v;
                    bi = id;
                }
            }
            nv[i] = bv;
            ni[i] = bi;
        }
        std::mem::swap(&mut vals, &mut nv);
        std::mem::swap(&mut idx, &mut ni);
    }
    (vals, idx)
}
