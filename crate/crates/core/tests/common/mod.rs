//! Brute-force reference implementations shared by the integration tests.

#![allow(dead_code)]

use brainshift::ffd::FfdGrid;
use brainshift::volume::{Geometry, Point3, Volume};
use rand::Rng;

/// Centered cubic B-spline `β³(x)`, support (-2, 2).
pub fn cubic_bspline(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        (4.0 - 6.0 * a * a + 3.0 * a * a * a) / 6.0
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// `u(x)` as a sum over every control point of the lattice.
pub fn brute_ffd(grid: &FfdGrid, x: Point3) -> [f64; 3] {
    let [nx, ny, nz] = grid.cp_dims();
    let sp = grid.cp_spacing();
    let o = grid.cp_origin();
    let t: Vec<f64> = (0..3).map(|a| (x[a] - o[a]) / sp[a]).collect();
    let mut u = [0.0; 3];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let w = cubic_bspline(t[0] - i as f64) * cubic_bspline(t[1] - j as f64) * cubic_bspline(t[2] - k as f64);
                let d = grid.displacements()[i + nx * (j + ny * k)];
                for c in 0..3 {
                    u[c] += w * d[c];
                }
            }
        }
    }
    u
}

/// Signed distance by comparing every voxel with every voxel of the opposite label.
pub fn brute_sdf(mask: &Volume, cap: f64) -> Vec<f64> {
    let g = mask.geometry();
    let n = g.n_voxels();
    let fg: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let idx: Vec<[f64; 3]> = (0..n).map(|i| g.unravel(i).map(|c| c as f64)).collect();
    (0..n)
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in 0..n {
                if fg[j] != fg[i] {
                    let d2: f64 = (0..3).map(|a| ((idx[i][a] - idx[j][a]) * g.spacing[a]).powi(2)).sum();
                    best = best.min(d2);
                }
            }
            let d = best.sqrt().min(cap);
            if fg[i] {
                -d
            } else {
                d
            }
        })
        .collect()
}

pub fn random_lattice(rng: &mut impl Rng, dims: [usize; 3]) -> FfdGrid {
    let spacing = [0; 3].map(|_| rng.gen_range(2.0..10.0));
    let origin = [0; 3].map(|_| rng.gen_range(-20.0..20.0));
    let n = dims.iter().product();
    let d = (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-4.0..4.0))).collect();
    FfdGrid::new(dims, spacing, origin, d).unwrap()
}

/// A point strictly inside the cubic-support region of `grid`.
pub fn interior_point(rng: &mut impl Rng, grid: &FfdGrid) -> Point3 {
    let dims = grid.cp_dims();
    let (sp, o) = (grid.cp_spacing(), grid.cp_origin());
    [0, 1, 2].map(|a| o[a] + sp[a] * rng.gen_range(1.0..(dims[a] - 2) as f64))
}

pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], spacing: [f64; 3]) -> Volume {
    let g = Geometry::centered(dims, spacing).unwrap();
    let p = rng.gen_range(0.05..0.6);
    loop {
        let data: Vec<f64> = (0..g.n_voxels()).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
        if data.contains(&0.0) && data.contains(&1.0) {
            return Volume::new(g, 1, data).unwrap();
        }
    }
}

/// Uniform random rotation from a unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let q = loop {
        let q = nalgebra::Vector4::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            break q / n;
        }
    };
    nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner()
}

pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}
