//! Forward and backward kernels for the operator set used by the network:
//! 3×3×3 convolution (padding 1), 1×1×1 convolution, ReLU, 2× max-pooling,
//! 2× nearest upsampling, channel concatenation and the logistic sigmoid.
//!
//! Tensors are channel-planar, x-fastest. The 3×3×3 convolutions run as
//! im2col plus a blocked matrix product over z-slabs. Every reduction runs
//! in a fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor { channels, dims, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Tensor { channels, dims, data }
    }

    pub fn plane_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes keep the summation order fixed while letting the compiler vectorize
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 18;

/// z-slices per slab so that a `27·cin × slab` column buffer fits the budget.
fn slab_depth(input: &Tensor) -> usize {
    let [nx, ny, nz] = input.dims;
    (COL_BUDGET / (27 * input.channels * nx * ny)).clamp(1, nz)
}

/// Column matrix `[cin·27][slab voxels]` for output slices `z0..z1`;
/// taps that fall outside the volume read zero.
fn im2col(input: &Tensor, z0: usize, z1: usize, col: &mut [f64]) {
    let [nx, ny, nz] = input.dims;
    let ns = nx * ny * (z1 - z0);
    for ic in 0..input.channels {
        let src = input.plane(ic);
        for t in 0..27 {
            let (dz, dy, dx) = (t as isize / 9 - 1, (t as isize / 3) % 3 - 1, t as isize % 3 - 1);
            let row = &mut col[(ic * 27 + t) * ns..(ic * 27 + t + 1) * ns];
            for z in z0..z1 {
                let sz = z as isize + dz;
                for y in 0..ny {
                    let sy = y as isize + dy;
                    let dst = &mut row[((z - z0) * ny + y) * nx..][..nx];
                    if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[(sz as usize * ny + sy as usize) * nx..][..nx];
                    shifted_copy(dst, srow, dx);
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the input slices it was read from.
fn col2im(dcol: &[f64], z0: usize, z1: usize, grad: &mut Tensor) {
    let [nx, ny, nz] = grad.dims;
    let ns = nx * ny * (z1 - z0);
    let plane = grad.plane_len();
    for ic in 0..grad.channels {
        let gplane = &mut grad.data[ic * plane..(ic + 1) * plane];
        for t in 0..27 {
            let (dz, dy, dx) = (t as isize / 9 - 1, (t as isize / 3) % 3 - 1, t as isize % 3 - 1);
            let row = &dcol[(ic * 27 + t) * ns..(ic * 27 + t + 1) * ns];
            for z in z0..z1 {
                let sz = z as isize + dz;
                if sz < 0 || sz >= nz as isize {
                    continue;
                }
                for y in 0..ny {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let src = &row[((z - z0) * ny + y) * nx..][..nx];
                    let dst = &mut gplane[(sz as usize * ny + sy as usize) * nx..][..nx];
                    match dx {
                        -1 => axpy(&mut dst[..nx - 1], 1.0, &src[1..]),
                        1 => axpy(&mut dst[1..], 1.0, &src[..nx - 1]),
                        _ => axpy(dst, 1.0, src),
                    }
                }
            }
        }
    }
}

/// `dst[x] = src[x + dx]`, zero where `x + dx` leaves the row.
#[inline]
fn shifted_copy(dst: &mut [f64], src: &[f64], dx: isize) {
    let n = dst.len();
    match dx {
        -1 => {
            dst[0] = 0.0;
            dst[1..].copy_from_slice(&src[..n - 1]);
        }
        1 => {
            dst[..n - 1].copy_from_slice(&src[1..]);
            dst[n - 1] = 0.0;
        }
        _ => dst.copy_from_slice(src),
    }
}

/// `C = A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64], rsc: isize, csc: isize) {
    let last = |r: usize, c: usize, rs: isize, cs: isize| (r.saturating_sub(1) as isize * rs + c.saturating_sub(1) as isize * cs) as usize;
    assert!(m == 0 || k == 0 || (last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len()));
    assert!(m == 0 || n == 0 || last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
    }
}

/// 3×3×3 cross-correlation with zero padding 1. `weight` is `[out][in][kz][ky][kx]`.
pub fn conv3_forward(input: &Tensor, weight: &[f64], bias: &[f64], out_channels: usize) -> Tensor {
    let [nx, ny, nz] = input.dims;
    let plane = input.plane_len();
    let k = input.channels * 27;
    debug_assert_eq!(weight.len(), out_channels * k);
    let mut out = Tensor::zeros(out_channels, input.dims);
    for (oc, p) in out.data.chunks_mut(plane).enumerate() {
        p.fill(bias[oc]);
    }
    let depth = slab_depth(input);
    let mut col = vec![0.0; k * nx * ny * depth];
    for z0 in (0..nz).step_by(depth) {
        let z1 = (z0 + depth).min(nz);
        let ns = nx * ny * (z1 - z0);
        im2col(input, z0, z1, &mut col[..k * ns]);
        let off = z0 * nx * ny;
        gemm(out_channels, k, ns, weight, k as isize, 1, &col[..k * ns], ns as isize, 1, 1.0, &mut out.data[off..], plane as isize, 1);
    }
    out
}

/// Gradients of a 3×3×3 convolution. Returns (input grad if requested, weight grad, bias grad).
pub fn conv3_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    need_input_grad: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let [nx, ny, nz] = input.dims;
    let plane = input.plane_len();
    let cout = grad_out.channels;
    let k = input.channels * 27;
    let grad_b: Vec<f64> = (0..cout).map(|oc| fixed_sum(grad_out.plane(oc))).collect();
    let mut grad_w = vec![0.0; cout * k];
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.channels, input.dims));

    let depth = slab_depth(input);
    let mut col = vec![0.0; k * nx * ny * depth];
    let mut dcol = if need_input_grad { vec![0.0; k * nx * ny * depth] } else { Vec::new() };
    for z0 in (0..nz).step_by(depth) {
        let z1 = (z0 + depth).min(nz);
        let ns = nx * ny * (z1 - z0);
        let off = z0 * nx * ny;
        let g = &grad_out.data[off..];
        im2col(input, z0, z1, &mut col[..k * ns]);
        // dW += G · colᵀ
        gemm(cout, ns, k, g, plane as isize, 1, &col[..k * ns], 1, ns as isize, 1.0, &mut grad_w, k as isize, 1);
        if let Some(gi) = grad_in.as_mut() {
            // dcol = Wᵀ · G
            gemm(k, cout, ns, weight, 1, k as isize, g, plane as isize, 1, 0.0, &mut dcol[..k * ns], ns as isize, 1);
            col2im(&dcol[..k * ns], z0, z1, gi);
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Pointwise (1×1×1) convolution; `weight` is `[out][in]`.
pub fn conv1_forward(input: &Tensor, weight: &[f64], bias: &[f64], out_channels: usize) -> Tensor {
    let plane = input.plane_len();
    let cin = input.channels;
    let mut out = Tensor::zeros(out_channels, input.dims);
    out.data.par_chunks_mut(plane).enumerate().for_each(|(oc, p)| {
        p.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..cin {
            axpy(p, weight[oc * cin + ic], input.plane(ic));
        }
    });
    out
}

pub fn conv1_backward(input: &Tensor, weight: &[f64], grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let cin = input.channels;
    let cout = grad_out.channels;
    let grad_b = (0..cout).map(|oc| fixed_sum(grad_out.plane(oc))).collect();
    let mut grad_w = vec![0.0; cout * cin];
    for oc in 0..cout {
        for ic in 0..cin {
            grad_w[oc * cin + ic] = dot(grad_out.plane(oc), input.plane(ic));
        }
    }
    let plane = input.plane_len();
    let mut gi = Tensor::zeros(cin, input.dims);
    gi.data.par_chunks_mut(plane).enumerate().for_each(|(ic, p)| {
        for oc in 0..cout {
            axpy(p, weight[oc * cin + ic], grad_out.plane(oc));
        }
    });
    (gi, grad_w, grad_b)
}

fn fixed_sum(xs: &[f64]) -> f64 {
    let ones = vec![1.0; xs.len()];
    dot(xs, &ones)
}

pub fn relu(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2× max pooling. Returns the pooled tensor and, per output, the input
/// index that won (ties to the lowest linear index).
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<usize>) {
    let [nx, ny, nz] = input.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(input.channels, od);
    let mut arg = vec![0usize; out.data.len()];
    let oplane = od[0] * od[1] * od[2];
    let iplane = input.plane_len();
    for c in 0..input.channels {
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = usize::MAX;
                    // visiting in increasing linear order with a strict comparison keeps the lowest index on ties
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = c * iplane + ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx;
                                if input.data[i] > best {
                                    best = input.data[i];
                                    bi = i;
                                }
                            }
                        }
                    }
                    let o = c * oplane + (z * od[1] + y) * od[0] + x;
                    out.data[o] = best;
                    arg[o] = bi;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_dims: [usize; 3], channels: usize, arg: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gi = Tensor::zeros(channels, input_dims);
    for (o, &i) in arg.iter().enumerate() {
        gi.data[i] += grad_out.data[o];
    }
    gi
}

pub fn upsample2_forward(input: &Tensor) -> Tensor {
    let [nx, ny, nz] = input.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut out = Tensor::zeros(input.channels, od);
    let oplane = od[0] * od[1] * od[2];
    let iplane = input.plane_len();
    for c in 0..input.channels {
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    out.data[c * oplane + (z * od[1] + y) * od[0] + x] = input.data[c * iplane + ((z / 2) * ny + y / 2) * nx + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(input_dims: [usize; 3], grad_out: &Tensor) -> Tensor {
    let [nx, ny, _] = input_dims;
    let od = grad_out.dims;
    let mut gi = Tensor::zeros(grad_out.channels, input_dims);
    let oplane = grad_out.plane_len();
    let iplane = gi.plane_len();
    for c in 0..grad_out.channels {
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    gi.data[c * iplane + ((z / 2) * ny + y / 2) * nx + x / 2] += grad_out.data[c * oplane + (z * od[1] + y) * od[0] + x];
                }
            }
        }
    }
    gi
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.dims, b.dims);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { channels: a.channels + b.channels, dims: a.dims, data }
}

/// Splits a concatenated gradient back into the `[a, b]` parts.
pub fn concat_backward(grad: &Tensor, a_channels: usize) -> (Tensor, Tensor) {
    let split = a_channels * grad.plane_len();
    (
        Tensor::from_data(a_channels, grad.dims, grad.data[..split].to_vec()),
        Tensor::from_data(grad.channels - a_channels, grad.dims, grad.data[split..].to_vec()),
    )
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
