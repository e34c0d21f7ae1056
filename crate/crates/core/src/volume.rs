//! Dense 3D grids with physical geometry.
//!
//! Voxel data is stored x-fastest with channels as the slowest axis
//! (`c * n_voxels + (z * ny + y) * nx + x`), the same order NIfTI uses on disk
//! for vector-valued images.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

const ORTHO_TOL: f64 = 1e-9;

/// Sampling grid of a volume: voxel counts plus the voxel-to-world affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Point3,
    /// Row-major voxel-to-world rotation; columns are the world directions of the voxel axes.
    pub direction: [[f64; 3]; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3, direction: [[f64; 3]; 3]) -> Result<Self> {
        let g = Geometry { dims, spacing, origin, direction };
        g.validate()?;
        Ok(g)
    }

    /// Axis-aligned geometry.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: Point3) -> Result<Self> {
        Self::new(dims, spacing, origin, IDENTITY)
    }

    /// Axis-aligned geometry whose grid center sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|i| -0.5 * (dims[i] as f64 - 1.0) * spacing[i]);
        Self::axis_aligned(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume("origin must be finite".into()));
        }
        let d = self.direction_matrix();
        let err = (d.transpose() * d - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(Error::InvalidVolume(format!("direction is not orthonormal (|DᵀD - I| = {err:.3e})")));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn direction_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.direction[r][c])
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// World position (mm) of a continuous voxel coordinate.
    pub fn voxel_to_world(&self, v: Point3) -> Point3 {
        let d = &self.direction;
        let s = [v[0] * self.spacing[0], v[1] * self.spacing[1], v[2] * self.spacing[2]];
        [0, 1, 2].map(|r| self.origin[r] + d[r][0] * s[0] + d[r][1] * s[1] + d[r][2] * s[2])
    }

    /// Continuous voxel coordinate of a world point; coordinates outside the grid are returned as-is.
    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        let d = &self.direction;
        let q = [p[0] - self.origin[0], p[1] - self.origin[1], p[2] - self.origin[2]];
        [0, 1, 2].map(|c| (d[0][c] * q[0] + d[1][c] * q[1] + d[2][c] * q[2]) / self.spacing[c])
    }

    pub fn voxel_center(&self, idx: usize) -> Point3 {
        let [x, y, z] = self.unravel(idx);
        self.voxel_to_world([x as f64, y as f64, z as f64])
    }

    /// 4x4 voxel-to-world affine, row-major.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        let d = &self.direction;
        let mut a = [[0.0; 4]; 4];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] = d[r][c] * self.spacing[c];
            }
            a[r][3] = self.origin[r];
        }
        a[3][3] = 1.0;
        a
    }

    /// Same grid within `tol` on every real-valued field.
    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|i| {
                (self.spacing[i] - other.spacing[i]).abs() <= tol
                    && (self.origin[i] - other.origin[i]).abs() <= tol
                    && (0..3).all(|j| (self.direction[i][j] - other.direction[i][j]).abs() <= tol)
            })
    }

    pub(crate) fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.approx_eq(other, 1e-6) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} vs {:?}, spacing {:?} vs {:?}",
                self.dims, other.dims, self.spacing, other.spacing
            )))
        }
    }
}

pub const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// A scalar (1 channel) or vector (3 channel) field on a [`Geometry`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geom: Geometry,
    channels: usize,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(geom: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        geom.validate()?;
        if channels == 0 {
            return Err(Error::InvalidVolume("channels must be positive".into()));
        }
        let expected = geom.n_voxels() * channels;
        if data.len() != expected {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?} x {channels} channels = {expected}",
                data.len(),
                geom.dims
            )));
        }
        Ok(Volume { geom, channels, data })
    }

    pub fn zeros(geom: Geometry, channels: usize) -> Self {
        let n = geom.n_voxels() * channels;
        Volume { geom, channels, data: vec![0.0; n] }
    }

    pub fn filled(geom: Geometry, channels: usize, value: f64) -> Self {
        let n = geom.n_voxels() * channels;
        Volume { geom, channels, data: vec![value; n] }
    }

    /// Builds a volume by evaluating `f` at every voxel center (world mm).
    pub fn from_fn(geom: Geometry, channels: usize, mut f: impl FnMut(Point3, &mut [f64])) -> Self {
        let n = geom.n_voxels();
        let mut data = vec![0.0; n * channels];
        let mut buf = vec![0.0; channels];
        for i in 0..n {
            f(geom.voxel_center(i), &mut buf);
            for (c, v) in buf.iter().enumerate() {
                data[c * n + i] = *v;
            }
        }
        Volume { geom, channels, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_voxels(&self) -> usize {
        self.geom.n_voxels()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.n_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.n_voxels() + self.geom.linear_index(x, y, z)]
    }

    /// Vector value at linear voxel index (first three channels).
    #[inline]
    pub fn vector_at(&self, idx: usize) -> [f64; 3] {
        let n = self.n_voxels();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    /// Same data on a different grid of identical dims.
    pub fn with_geometry(mut self, geom: Geometry) -> Result<Self> {
        geom.validate()?;
        if geom.dims != self.geom.dims {
            return Err(Error::GeometryMismatch(format!("dims {:?} vs {:?}", geom.dims, self.geom.dims)));
        }
        self.geom = geom;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume { geom: self.geom.clone(), channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        self.geom.world_to_voxel(p)
    }

    /// Trilinear interpolation of every channel at world point `p`, clamping to the border voxels.
    pub fn trilinear_sample(&self, p: Point3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.trilinear_into(p, &mut out);
        out
    }

    pub fn trilinear_into(&self, p: Point3, out: &mut [f64]) {
        let v = self.geom.world_to_voxel(p);
        self.trilinear_voxel_into(v, out);
    }

    /// Trilinear interpolation at a continuous voxel coordinate.
    pub fn trilinear_voxel_into(&self, v: Point3, out: &mut [f64]) {
        let (idx, w) = self.corner_weights(v);
        let n = self.n_voxels();
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let base = &self.data[c * n..(c + 1) * n];
            *o = idx.iter().zip(w.iter()).map(|(&i, &wi)| wi * base[i]).sum();
        }
    }

    /// The 8 corner indices and tensor-product weights used for trilinear interpolation.
    pub(crate) fn corner_weights(&self, v: Point3) -> ([usize; 8], [f64; 8]) {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.geom.dims[a];
            let t = v[a].clamp(0.0, (n - 1) as f64);
            let i0 = (t.floor() as usize).min(n - 1);
            lo[a] = i0;
            hi[a] = (i0 + 1).min(n - 1);
            frac[a] = t - i0 as f64;
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0; 8];
        for k in 0..8 {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let x = if bx == 1 { hi[0] } else { lo[0] };
            let y = if by == 1 { hi[1] } else { lo[1] };
            let z = if bz == 1 { hi[2] } else { lo[2] };
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            idx[k] = self.geom.linear_index(x, y, z);
            w[k] = wx * wy * wz;
        }
        (idx, w)
    }

    /// Nearest-voxel lookup with border clamping.
    pub fn nearest_sample(&self, p: Point3) -> Vec<f64> {
        let v = self.geom.world_to_voxel(p);
        let ijk: [usize; 3] = [0, 1, 2].map(|a| v[a].round().clamp(0.0, (self.geom.dims[a] - 1) as f64) as usize);
        let i = self.geom.linear_index(ijk[0], ijk[1], ijk[2]);
        let n = self.n_voxels();
        (0..self.channels).map(|c| self.data[c * n + i]).collect()
    }

    /// Binary copy: 1 where value > threshold, else 0.
    pub fn threshold(&self, threshold: f64) -> Volume {
        self.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }

    pub fn ensure_channels(&self, channels: usize, what: &str) -> Result<()> {
        if self.channels == channels {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!("{what}: expected {channels} channel(s), got {}", self.channels)))
        }
    }
}

pub(crate) fn vec3(p: Point3) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

pub(crate) fn point(v: &Vector3<f64>) -> Point3 {
    [v[0], v[1], v[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = nalgebra::Rotation3::from_scaled_axis(axis.normalize() * rng.gen_range(-3.0..3.0));
        let m = rot.matrix();
        [[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]]
    }

    #[test]
    fn world_to_voxel_identity_and_scaling() {
        let g = Geometry::axis_aligned([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.world_to_voxel([2.0, 3.0, 4.0]), [2.0, 3.0, 4.0]);
        let g = Geometry::axis_aligned([8, 8, 8], [2.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.world_to_voxel([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn world_round_trip_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let spacing = [0, 1, 2].map(|_| rng.gen_range(0.2..4.0));
            let origin = [0, 1, 2].map(|_| rng.gen_range(-100.0..100.0));
            let g = Geometry::new([10, 10, 10], spacing, origin, random_rotation(&mut rng)).unwrap();
            let q = [0, 1, 2].map(|_| rng.gen_range(-5.0..15.0));
            // independent composition: explicit 4x4 affine product
            let a = g.affine();
            let p = [0, 1, 2].map(|r| a[r][0] * q[0] + a[r][1] * q[1] + a[r][2] * q[2] + a[r][3]);
            let back = g.world_to_voxel(p);
            for i in 0..3 {
                assert!((back[i] - q[i]).abs() < 1e-9, "{back:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::axis_aligned([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::axis_aligned([1, 1, 1], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Geometry::new([1, 1, 1], [1.0; 3], [0.0; 3], skew).is_err());
        let g = Geometry::axis_aligned([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        assert!(Volume::new(g, 1, vec![0.0; 7]).is_err());
    }

    #[test]
    fn trilinear_reproduces_nodes_and_midpoints() {
        let g = Geometry::axis_aligned([4, 3, 2], [1.0, 2.0, 0.5], [1.0, -1.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..24).map(|_| rng.gen()).collect();
        let vol = Volume::new(g.clone(), 1, data.clone()).unwrap();
        for i in 0..24 {
            assert_eq!(vol.trilinear_sample(g.voxel_center(i))[0], data[i]);
        }
        let mut d = vec![0.0; 24];
        d[g.linear_index(1, 0, 0)] = 1.0;
        let vol = Volume::new(g.clone(), 1, d).unwrap();
        let p = g.voxel_to_world([0.5, 0.0, 0.0]);
        assert!((vol.trilinear_sample(p)[0] - 0.5).abs() < 1e-15);
    }

    /// Brute force: sum over all voxels of the hat-function weight product.
    fn brute_trilinear(vol: &Volume, v: Point3) -> f64 {
        let d = vol.dims();
        let c = [0, 1, 2].map(|a| v[a].clamp(0.0, (d[a] - 1) as f64));
        let mut s = 0.0;
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let w = (1.0 - (c[0] - x as f64).abs()).max(0.0)
                        * (1.0 - (c[1] - y as f64).abs()).max(0.0)
                        * (1.0 - (c[2] - z as f64).abs()).max(0.0);
                    s += w * vol.get(0, x, y, z);
                }
            }
        }
        s
    }

    #[test]
    fn trilinear_matches_brute_force_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Geometry::new([8, 8, 8], [1.0, 1.5, 0.7], [3.0, -2.0, 1.0], random_rotation(&mut rng)).unwrap();
        let data: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vol = Volume::new(g.clone(), 1, data).unwrap();
        for _ in 0..100 {
            let v = [0, 1, 2].map(|_| rng.gen_range(-1.0..8.0));
            let got = vol.trilinear_sample(g.voxel_to_world(v))[0];
            assert!((got - brute_trilinear(&vol, v)).abs() < 1e-9);
        }
    }

    #[test]
    fn trilinear_exact_on_affine_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Geometry::new([6, 7, 5], [1.2, 0.8, 2.0], [-3.0, 4.0, 0.5], random_rotation(&mut rng)).unwrap();
        let a = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let b = rng.gen_range(-5.0..5.0);
        let f = |p: Point3| a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + b;
        let vol = Volume::from_fn(g.clone(), 1, |p, out| out[0] = f(p));
        for _ in 0..200 {
            let v = [rng.gen_range(0.0..5.0), rng.gen_range(0.0..6.0), rng.gen_range(0.0..4.0)];
            let p = g.voxel_to_world(v);
            assert!((vol.trilinear_sample(p)[0] - f(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let g = Geometry::axis_aligned([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume::new(g, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(vol.trilinear_sample([-5.0, 0.0, 0.0])[0], 1.0);
        assert_eq!(vol.trilinear_sample([9.0, 3.0, -2.0])[0], 3.0);
        assert_eq!(vol.nearest_sample([1.4, 0.0, 0.0])[0], 2.0);
    }
}
