//! Cubic B-spline free-form deformation.
//!
//! A lattice of control-point displacements `d_ijk` defines
//! `u(x) = Σ B_a(s) B_b(t) B_c(w) d_ijk` over the 4×4×4 control points around
//! `x`, with `(s, t, w)` the fractional lattice coordinates. The deformation
//! is `y(x) = x + u(x)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Geometry, Point3, Volume, IDENTITY};

/// Uniform cubic B-spline weights for the control points at offsets -1, 0, +1, +2 from `floor(t)`.
#[inline]
pub fn bspline_weights(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    let one_minus = 1.0 - s;
    [
        one_minus * one_minus * one_minus / 6.0,
        (3.0 * s3 - 6.0 * s2 + 4.0) / 6.0,
        (-3.0 * s3 + 3.0 * s2 + 3.0 * s + 1.0) / 6.0,
        s3 / 6.0,
    ]
}

/// Control-point lattice. Axis-aligned; control point `(i, j, k)` sits at
/// `cp_origin + (i, j, k) ⊙ cp_spacing`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfdGrid {
    cp_dims: [usize; 3],
    cp_spacing: [f64; 3],
    cp_origin: Point3,
    displacements: Vec<[f64; 3]>,
}

impl FfdGrid {
    pub fn new(cp_dims: [usize; 3], cp_spacing: [f64; 3], cp_origin: Point3, displacements: Vec<[f64; 3]>) -> Result<Self> {
        if cp_dims.iter().any(|&n| n < 4) {
            return Err(Error::InvalidVolume(format!("control lattice needs >= 4 points per axis, got {cp_dims:?}")));
        }
        if cp_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!("control spacing must be positive, got {cp_spacing:?}")));
        }
        let n = cp_dims[0] * cp_dims[1] * cp_dims[2];
        if displacements.len() != n {
            return Err(Error::InvalidVolume(format!("{} displacements for a {cp_dims:?} lattice", displacements.len())));
        }
        Ok(FfdGrid { cp_dims, cp_spacing, cp_origin, displacements })
    }

    pub fn zeros(cp_dims: [usize; 3], cp_spacing: [f64; 3], cp_origin: Point3) -> Result<Self> {
        let n = cp_dims.iter().product();
        Self::new(cp_dims, cp_spacing, cp_origin, vec![[0.0; 3]; n])
    }

    /// Smallest lattice with spacing `cp_spacing` whose support, inset by one
    /// control cell, covers every voxel center of `geom`. The lattice is
    /// centered on the image bounding box.
    pub fn covering(geom: &Geometry, cp_spacing: [f64; 3]) -> Result<Self> {
        let (lo, hi) = world_bounds(geom);
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let span = hi[a] - lo[a];
            dims[a] = (span / cp_spacing[a]).floor() as usize + 4;
            let center = 0.5 * (lo[a] + hi[a]);
            origin[a] = center - 0.5 * (dims[a] as f64 - 1.0) * cp_spacing[a];
        }
        Self::zeros(dims, cp_spacing, origin)
    }

    pub fn cp_dims(&self) -> [usize; 3] {
        self.cp_dims
    }

    pub fn cp_spacing(&self) -> [f64; 3] {
        self.cp_spacing
    }

    pub fn cp_origin(&self) -> Point3 {
        self.cp_origin
    }

    pub fn displacements(&self) -> &[[f64; 3]] {
        &self.displacements
    }

    pub fn displacements_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.displacements
    }

    #[inline]
    pub fn cp_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.cp_dims[1] + j) * self.cp_dims[0] + i
    }

    pub fn cp_position(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.cp_origin[0] + i as f64 * self.cp_spacing[0],
            self.cp_origin[1] + j as f64 * self.cp_spacing[1],
            self.cp_origin[2] + k as f64 * self.cp_spacing[2],
        ]
    }

    /// Continuous lattice coordinate of a world point.
    pub fn lattice_coord(&self, x: Point3) -> Point3 {
        [0, 1, 2].map(|a| (x[a] - self.cp_origin[a]) / self.cp_spacing[a])
    }

    /// Scales every control displacement whose norm exceeds `max_norm` back onto that norm.
    pub fn clamp_norm(&mut self, max_norm: f64) {
        for d in &mut self.displacements {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if n > max_norm {
                let f = max_norm / n;
                d.iter_mut().for_each(|v| *v *= f);
            }
        }
    }

    /// Sufficient bound on control displacements for a fold-free cubic FFD.
    pub fn fold_free_bound(&self) -> f64 {
        0.4 * self.cp_spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `u(x)` in mm.
    pub fn displacement(&self, x: Point3) -> Result<[f64; 3]> {
        let t = self.lattice_coord(x);
        let mut base = [0usize; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let n = self.cp_dims[a];
            let mut f = t[a].floor();
            let mut s = t[a] - f;
            // the far edge of the support belongs to the last full cell
            if f == (n - 2) as f64 && s == 0.0 {
                f -= 1.0;
                s = 1.0;
            }
            if !(f >= 1.0 && f + 2.0 <= (n - 1) as f64) {
                return Err(Error::OutsideSupport { point: x });
            }
            base[a] = f as usize - 1;
            w[a] = bspline_weights(s);
        }
        let mut u = [0.0; 3];
        for (c, wz) in w[2].iter().enumerate() {
            for (b, wy) in w[1].iter().enumerate() {
                let wyz = wy * wz;
                let row = self.cp_index(base[0], base[1] + b, base[2] + c);
                for (a, wx) in w[0].iter().enumerate() {
                    let wt = wx * wyz;
                    let d = &self.displacements[row + a];
                    u[0] += wt * d[0];
                    u[1] += wt * d[1];
                    u[2] += wt * d[2];
                }
            }
        }
        Ok(u)
    }

    /// Deformed position `y(x) = x + u(x)`.
    pub fn deform(&self, x: Point3) -> Result<Point3> {
        let u = self.displacement(x)?;
        Ok([x[0] + u[0], x[1] + u[1], x[2] + u[2]])
    }

    /// Dense 3-channel displacement volume sampled at every voxel center of `geom`.
    pub fn densify(&self, geom: &Geometry) -> Result<Volume> {
        let n = geom.n_voxels();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let u = self.displacement(geom.voxel_center(i))?;
            data[i] = u[0];
            data[n + i] = u[1];
            data[2 * n + i] = u[2];
        }
        Volume::new(geom.clone(), 3, data)
    }

    /// The lattice as a 3-channel volume (the on-disk cpp layout).
    pub fn to_volume(&self) -> Volume {
        let geom = Geometry::axis_aligned(self.cp_dims, self.cp_spacing, self.cp_origin).expect("validated lattice");
        let n = self.displacements.len();
        let mut data = vec![0.0; 3 * n];
        for (i, d) in self.displacements.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = d[c];
            }
        }
        Volume::new(geom, 3, data).expect("lattice volume")
    }

    pub fn from_volume(vol: &Volume) -> Result<Self> {
        if vol.channels() != 3 {
            return Err(Error::NotVectorField { detail: format!("{} channel(s)", vol.channels()) });
        }
        let g = vol.geometry();
        let off = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| (g.direction[r][c] - IDENTITY[r][c]).abs()).fold(0.0, f64::max);
        if off > 1e-6 {
            return Err(Error::GeometryMismatch("control lattice must be axis-aligned".into()));
        }
        let n = vol.n_voxels();
        let d = vol.data();
        let displacements = (0..n).map(|i| [d[i], d[n + i], d[2 * n + i]]).collect();
        Self::new(g.dims, g.spacing, g.origin, displacements)
    }
}

/// Axis-aligned world bounding box of the voxel centers of `geom`.
pub fn world_bounds(geom: &Geometry) -> (Point3, Point3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let v = [0, 1, 2].map(|a| if (corner >> a) & 1 == 1 { (geom.dims[a] - 1) as f64 } else { 0.0 });
        let p = geom.voxel_to_world(v);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Reads a control-point grid stored as a vector NIfTI.
pub fn read_cpp(path: impl AsRef<Path>) -> Result<FfdGrid> {
    let vol = nifti::read_nifti(path)?;
    FfdGrid::from_volume(&vol)
}

/// Writes the grid as a float32 vector NIfTI; displacements round to float32.
pub fn write_cpp(grid: &FfdGrid, path: impl AsRef<Path>) -> Result<()> {
    nifti::write_nifti(&grid.to_volume(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_partition_unity_and_reproduce_linear() {
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            let w = bspline_weights(s);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            // Σ w_k (k - 1) = s
            let lin = -w[0] + w[2] + 2.0 * w[3];
            assert!((lin - s).abs() < 1e-15);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_and_constant_lattices() {
        let mut g = FfdGrid::zeros([5, 5, 5], [2.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.displacement([3.3, 4.1, 5.0]).unwrap(), [0.0; 3]);
        g.displacements_mut().iter_mut().for_each(|d| *d = [0.5, -1.25, 2.0]);
        let u = g.displacement([3.3, 4.1, 5.9]).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-12 && (u[1] + 1.25).abs() < 1e-12 && (u[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn support_edges() {
        let g = FfdGrid::zeros([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        // valid support is [1, 2] per axis
        assert!(g.displacement([1.0, 1.0, 1.0]).is_ok());
        assert!(g.displacement([2.0, 2.0, 2.0]).is_ok());
        assert!(matches!(g.displacement([0.99, 1.5, 1.5]), Err(Error::OutsideSupport { .. })));
        assert!(matches!(g.displacement([1.5, 2.01, 1.5]), Err(Error::OutsideSupport { .. })));
        assert!(FfdGrid::zeros([3, 4, 4], [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn covering_lattice_supports_all_voxels() {
        let geom = Geometry::centered([32, 20, 17], [1.0, 1.5, 2.0]).unwrap();
        let g = FfdGrid::covering(&geom, [8.0; 3]).unwrap();
        assert_eq!(g.cp_dims()[0], 7);
        let field = g.densify(&geom).unwrap();
        assert!(field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn densify_matches_pointwise() {
        let geom = Geometry::centered([9, 8, 7], [1.0; 3]).unwrap();
        let mut g = FfdGrid::covering(&geom, [4.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        g.displacements_mut().iter_mut().for_each(|d| *d = [rng.gen(), rng.gen(), rng.gen()]);
        let field = g.densify(&geom).unwrap();
        for _ in 0..50 {
            let i = rng.gen_range(0..geom.n_voxels());
            let u = g.displacement(geom.voxel_center(i)).unwrap();
            assert_eq!(field.vector_at(i), u);
        }
    }

    #[test]
    fn cpp_volume_round_trip_and_vector_check() {
        let mut g = FfdGrid::zeros([4, 5, 6], [3.0, 4.0, 5.0], [-1.0, 2.0, 3.0]).unwrap();
        g.displacements_mut().iter_mut().enumerate().for_each(|(i, d)| *d = [i as f64, -(i as f64), 0.5]);
        assert_eq!(FfdGrid::from_volume(&g.to_volume()).unwrap(), g);
        let scalar = Volume::zeros(Geometry::centered([4, 4, 4], [1.0; 3]).unwrap(), 1);
        assert!(matches!(FfdGrid::from_volume(&scalar), Err(Error::NotVectorField { .. })));
    }

    #[test]
    fn clamp_norm_bounds_displacements() {
        let mut g = FfdGrid::zeros([4, 4, 4], [8.0; 3], [0.0; 3]).unwrap();
        g.displacements_mut()[0] = [10.0, 0.0, 0.0];
        g.displacements_mut()[1] = [1.0, 1.0, 0.0];
        g.clamp_norm(g.fold_free_bound());
        assert!((g.displacements()[0][0] - 3.2).abs() < 1e-12);
        assert_eq!(g.displacements()[1], [1.0, 1.0, 0.0]);
    }
}
