//! Synthetic paired pre/intra-operative phantoms with known deformation.
//!
//! A case is generated in a canonical frame with the cavity on the right
//! (+x) hemisphere. Left cases are the exact mirror image of the right case
//! with the same seed: volumes flipped in x, the x displacement negated and
//! the L/R landmark names exchanged.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffd::FfdGrid;
use crate::geometry::LandmarkSet;
use crate::nifti::{read_nifti, write_nifti};
use crate::shape::{signed_distance, DEFAULT_SDF_CAP_MM};
use crate::volume::{Geometry, Point3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn suffix(self) -> &'static str {
        match self {
            Side::Left => "L",
            Side::Right => "R",
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl std::str::FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Side::Left),
            "right" | "r" => Ok(Side::Right),
            other => Err(format!("unknown side '{other}'")),
        }
    }
}

/// One paired case with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub pmri: Volume,
    pub imri: Volume,
    /// 1 on the resection hemisphere.
    pub half_mask: Volume,
    pub mask_pre: Volume,
    pub gt_disp: Volume,
    pub gt_mask_intra: Volume,
    pub gt_sdf: Volume,
    pub landmarks_pre: LandmarkSet,
    pub landmarks_intra: LandmarkSet,
    /// AC, PC and IH.
    pub frame_landmarks: LandmarkSet,
    pub side: Side,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    /// Brain semi-axes as fractions of the field of view.
    pub semi_axes_frac: [f64; 3],
    pub shape_jitter: f64,
    /// Cavity radius as a fraction of the mean brain diameter.
    pub cavity_radius_frac: f64,
    pub cp_spacing_mm: f64,
    /// Global scale of the deformation; 0 disables it.
    pub amplitude: f64,
    pub amplitude_jitter: f64,
    pub pull_mm: f64,
    pub pull_radius_mm: f64,
    pub noise_mm: f64,
    pub sag_mm: f64,
    pub texture_contrast: f64,
    pub bias_strength: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [32, 32, 32],
            spacing_mm: 1.0,
            semi_axes_frac: [0.34, 0.40, 0.31],
            shape_jitter: 0.06,
            cavity_radius_frac: 0.15,
            cp_spacing_mm: 8.0,
            amplitude: 1.0,
            amplitude_jitter: 0.15,
            pull_mm: 3.0,
            pull_radius_mm: 8.0,
            noise_mm: 0.25,
            sag_mm: 1.0,
            texture_contrast: 0.15,
            bias_strength: 0.1,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.dims.iter().any(|&d| d < 8 || d % 4 != 0) {
            errors.push(format!("phantom.dims must be multiples of 4 and at least 8, got {:?}", self.dims));
        }
        let positive = [
            ("spacing_mm", self.spacing_mm),
            ("cp_spacing_mm", self.cp_spacing_mm),
            ("pull_radius_mm", self.pull_radius_mm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("phantom.{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("amplitude", self.amplitude),
            ("pull_mm", self.pull_mm),
            ("noise_mm", self.noise_mm),
            ("sag_mm", self.sag_mm),
            ("texture_contrast", self.texture_contrast),
            ("bias_strength", self.bias_strength),
            ("cavity_radius_frac", self.cavity_radius_frac),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                errors.push(format!("phantom.{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("shape_jitter", self.shape_jitter), ("amplitude_jitter", self.amplitude_jitter)] {
            if !(0.0..0.5).contains(&v) {
                errors.push(format!("phantom.{name} must lie in [0, 0.5), got {v}"));
            }
        }
        if self.semi_axes_frac.iter().any(|&f| !(f > 0.0 && f < 0.5)) {
            errors.push(format!("phantom.semi_axes_frac must lie in (0, 0.5), got {:?}", self.semi_axes_frac));
        }
    }

    fn checked(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Upper bound on `‖gt_disp‖` for any seed.
    pub fn displacement_bound(&self) -> f64 {
        let scale = self.amplitude * (1.0 + self.amplitude_jitter);
        (0.4 * self.cp_spacing_mm).min(scale * (self.pull_mm + 4.0 * self.noise_mm)) + scale * self.sag_mm
    }
}

/// Directions of the evaluation landmarks on the right hemisphere; left
/// landmarks mirror them and the midline ones have x = 0.
const LANDMARK_DIRECTIONS: [(&str, [f64; 3]); 10] = [
    ("P1R", [0.55, 0.55, 0.10]),
    ("P1L", [-0.55, 0.55, 0.10]),
    ("P2R", [0.75, 0.0, 0.35]),
    ("P2L", [-0.75, 0.0, 0.35]),
    ("P3", [0.0, 0.7, 0.6]),
    ("P4R", [0.6, -0.5, 0.2]),
    ("P4L", [-0.6, -0.5, 0.2]),
    ("P5", [0.0, -0.7, 0.5]),
    ("P6R", [0.7, 0.15, -0.5]),
    ("P6L", [-0.7, 0.15, -0.5]),
];

/// Landmarks sit on a shell just inside the brain surface.
const LANDMARK_SHELL: f64 = 0.9;

const CAVITY_DIRECTION: [f64; 3] = [0.92, 0.1, -0.35];

struct Anatomy {
    semi_axes: [f64; 3],
    cavity_center: Point3,
    cavity_radius: f64,
}

impl Anatomy {
    fn inside_brain(&self, p: Point3) -> bool {
        let [a, b, c] = self.semi_axes;
        (p[0] / a).powi(2) + (p[1] / b).powi(2) + (p[2] / c).powi(2) <= 1.0
    }

    fn inside_cavity(&self, p: Point3) -> bool {
        dist2(p, self.cavity_center) <= self.cavity_radius * self.cavity_radius
    }
}

fn dist2(a: Point3, b: Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn to_f32_precision(mut v: Volume) -> Volume {
    v.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    v
}

/// Generates one case. Same `(seed, params)` with opposite sides gives mirror images.
pub fn gen_phantom(seed: u64, side: Side, params: &PhantomParams) -> Result<Case> {
    params.checked()?;
    let right = gen_right(seed, params)?;
    Ok(match side {
        Side::Right => right,
        Side::Left => mirror_case(&right)?,
    })
}

fn gen_right(seed: u64, p: &PhantomParams) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = Geometry::centered(p.dims, [p.spacing_mm; 3])?;
    let fov = [0, 1, 2].map(|a| p.dims[a] as f64 * p.spacing_mm);

    let mut semi_axes = [0.0; 3];
    for a in 0..3 {
        semi_axes[a] = p.semi_axes_frac[a] * fov[a] * (1.0 + p.shape_jitter * rng.gen_range(-1.0..1.0));
    }
    let mean_diameter = 2.0 * semi_axes.iter().sum::<f64>() / 3.0;
    let cavity_center = [0, 1, 2].map(|a| CAVITY_DIRECTION[a] * semi_axes[a]);
    let anatomy = Anatomy { semi_axes, cavity_center, cavity_radius: p.cavity_radius_frac * mean_diameter };

    // band-limited texture: a few plane waves with 6-16 mm wavelengths
    let waves: Vec<([f64; 3], f64)> = (0..12)
        .map(|_| {
            let dir = random_unit(&mut rng);
            let k = 2.0 * PI / rng.gen_range(6.0..16.0);
            (dir.map(|d| d * k), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let bias_dir = random_unit(&mut rng);
    let radius = semi_axes.iter().copied().fold(0.0, f64::max);
    let norm = 1.0 / (waves.len() as f64).sqrt();

    let mask_pre = Volume::from_fn(geom.clone(), 1, |x, o| o[0] = if anatomy.inside_brain(x) { 1.0 } else { 0.0 });
    let pmri = Volume::from_fn(geom.clone(), 1, |x, o| {
        if !anatomy.inside_brain(x) {
            o[0] = 0.0;
            return;
        }
        let tex: f64 = waves.iter().map(|(k, ph)| (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).cos()).sum::<f64>() * norm;
        let bias = 1.0 + p.bias_strength * (bias_dir[0] * x[0] + bias_dir[1] * x[1] + bias_dir[2] * x[2]) / radius;
        o[0] = (0.8 + p.texture_contrast * tex) * bias;
    });
    let pmri = to_f32_precision(pmri);

    let amp = p.amplitude * (1.0 + p.amplitude_jitter * rng.gen_range(-1.0..1.0));
    let mut grid = FfdGrid::covering(&geom, [p.cp_spacing_mm; 3])?;
    let [ni, nj, nk] = grid.cp_dims();
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                let c = grid.cp_position(i, j, k);
                let to_cavity = [0, 1, 2].map(|a| anatomy.cavity_center[a] - c[a]);
                let d = dist2(c, anatomy.cavity_center).sqrt();
                let pull = p.pull_mm * (-(d * d) / (2.0 * p.pull_radius_mm * p.pull_radius_mm)).exp();
                let mut u = [0.0; 3];
                for a in 0..3 {
                    let dir = if d > 1e-12 { to_cavity[a] / d } else { 0.0 };
                    let n: f64 = StandardNormal.sample(&mut rng);
                    u[a] = amp * (pull * dir + p.noise_mm * n);
                }
                let idx = grid.cp_index(i, j, k);
                grid.displacements_mut()[idx] = u;
            }
        }
    }
    let bound = grid.fold_free_bound();
    grid.clamp_norm(bound);
    let sag = amp * p.sag_mm;
    grid.displacements_mut().iter_mut().for_each(|d| d[2] -= sag);

    let gt_disp = to_f32_precision(grid.densify(&geom)?);
    let warped = warp_volume(&pmri, &gt_disp)?;
    let warped_mask = warp_mask(&mask_pre, &gt_disp)?;
    let mut imri = warped;
    let mut gt_mask_intra = warped_mask;
    for i in 0..geom.n_voxels() {
        if anatomy.inside_cavity(geom.voxel_center(i)) {
            imri.data_mut()[i] = 0.0;
            gt_mask_intra.data_mut()[i] = 0.0;
        }
    }
    let imri = to_f32_precision(imri);
    let gt_sdf = to_f32_precision(signed_distance(&gt_mask_intra, DEFAULT_SDF_CAP_MM));
    let half_mask = Volume::from_fn(geom.clone(), 1, |x, o| o[0] = if x[0] > 0.0 { 1.0 } else { 0.0 });

    let landmarks_pre = LandmarkSet::from_pairs(LANDMARK_DIRECTIONS.iter().map(|(name, dir)| {
        let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        (*name, [0, 1, 2].map(|a| LANDMARK_SHELL * semi_axes[a] * dir[a] / len))
    }))?;
    let landmarks_intra = warp_landmarks(&landmarks_pre, &gt_disp)?;
    let frame_landmarks = LandmarkSet::from_pairs([
        ("AC", [0.0, 0.1 * semi_axes[1], 0.0]),
        ("PC", [0.0, -0.15 * semi_axes[1], 0.0]),
        ("IH", [0.0, 0.0, 0.5 * semi_axes[2]]),
    ])?;

    Ok(Case {
        pmri,
        imri,
        half_mask,
        mask_pre,
        gt_disp,
        gt_mask_intra,
        gt_sdf,
        landmarks_pre,
        landmarks_intra,
        frame_landmarks,
        side: Side::Right,
        seed,
    })
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

/// Flips a volume along the x index; with `negate_x` the first channel is negated as well.
pub fn mirror_x(vol: &Volume, negate_x: bool) -> Volume {
    let [nx, ny, nz] = vol.dims();
    let n = vol.n_voxels();
    let mut out = vol.clone();
    for c in 0..vol.channels() {
        let sign = if negate_x && c == 0 { -1.0 } else { 1.0 };
        let src = &vol.data()[c * n..(c + 1) * n];
        let dst = &mut out.data_mut()[c * n..(c + 1) * n];
        for z in 0..nz {
            for y in 0..ny {
                let row = (z * ny + y) * nx;
                for x in 0..nx {
                    dst[row + x] = sign * src[row + nx - 1 - x];
                }
            }
        }
    }
    out
}

fn mirror_name(name: &str) -> String {
    match name.strip_suffix('L') {
        Some(stem) => format!("{stem}R"),
        None => match name.strip_suffix('R') {
            Some(stem) => format!("{stem}L"),
            None => name.to_string(),
        },
    }
}

fn mirror_landmarks(set: &LandmarkSet) -> Result<LandmarkSet> {
    let mut entries: Vec<(String, Point3)> =
        set.entries().iter().map(|l| (mirror_name(&l.name), [-l.pos_mm[0], l.pos_mm[1], l.pos_mm[2]])).collect();
    // keep the canonical name order
    let order: Vec<&str> = set.names().collect();
    entries.sort_by_key(|(n, _)| order.iter().position(|o| o == n));
    LandmarkSet::from_pairs(entries.iter().map(|(n, p)| (n.as_str(), *p)))
}

/// Mirror image of a case across the mid-sagittal plane x = 0. Requires a geometry centered in x.
pub fn mirror_case(case: &Case) -> Result<Case> {
    let g = case.pmri.geometry();
    let [nx, _, _] = g.dims;
    let centered = (g.origin[0] + 0.5 * (nx as f64 - 1.0) * g.spacing[0]).abs() < 1e-9;
    if !centered || !g.approx_eq(&Geometry::axis_aligned(g.dims, g.spacing, g.origin)?, 1e-12) {
        return Err(Error::GeometryMismatch("mirroring needs an axis-aligned geometry centered in x".into()));
    }
    let gt_disp = mirror_x(&case.gt_disp, true);
    let landmarks_pre = mirror_landmarks(&case.landmarks_pre)?;
    Ok(Case {
        pmri: mirror_x(&case.pmri, false),
        imri: mirror_x(&case.imri, false),
        half_mask: mirror_x(&case.half_mask, false),
        mask_pre: mirror_x(&case.mask_pre, false),
        gt_mask_intra: mirror_x(&case.gt_mask_intra, false),
        gt_sdf: mirror_x(&case.gt_sdf, false),
        landmarks_intra: warp_landmarks(&landmarks_pre, &gt_disp)?,
        gt_disp,
        landmarks_pre,
        frame_landmarks: mirror_landmarks(&case.frame_landmarks)?,
        side: case.side.opposite(),
        seed: case.seed,
    })
}

fn check_field(vol: &Volume, disp: &Volume) -> Result<()> {
    disp.ensure_channels(3, "displacement field")?;
    vol.geometry().ensure_same(disp.geometry(), "warp")
}

/// Backward warp: `out(x) = vol(x + disp(x))`, trilinear with border clamping.
pub fn warp_volume(vol: &Volume, disp: &Volume) -> Result<Volume> {
    check_field(vol, disp)?;
    let g = vol.geometry();
    let n = g.n_voxels();
    let c = vol.channels();
    let mut planar = vec![0.0; n * c];
    let samples: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = g.voxel_center(i);
            let u = disp.vector_at(i);
            vol.trilinear_sample([x[0] + u[0], x[1] + u[1], x[2] + u[2]])
        })
        .collect();
    for (i, s) in samples.iter().enumerate() {
        for ch in 0..c {
            planar[ch * n + i] = s[ch];
        }
    }
    Volume::new(g.clone(), c, planar)
}

/// Warps a binary mask and re-binarizes at 0.5.
pub fn warp_mask(mask: &Volume, disp: &Volume) -> Result<Volume> {
    Ok(warp_volume(mask, disp)?.threshold(0.5))
}

/// `p -> p + disp(p)` with trilinear sampling of the field.
pub fn warp_landmarks(lms: &LandmarkSet, disp: &Volume) -> Result<LandmarkSet> {
    disp.ensure_channels(3, "displacement field")?;
    let mut u = [0.0; 3];
    Ok(lms.map_positions(|p| {
        disp.trilinear_into(p, &mut u);
        [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
    }))
}

/// Cases `base_seed + i`, alternating right and left starting with right.
pub fn gen_cohort(base_seed: u64, n: usize, params: &PhantomParams) -> Result<Vec<Case>> {
    params.checked()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let side = if i % 2 == 0 { Side::Right } else { Side::Left };
            gen_phantom(base_seed + i as u64, side, params)
        })
        .collect()
}

const VOLUME_FILES: [&str; 7] = ["pmri", "imri", "half_mask", "mask_pre", "gt_disp", "gt_mask_intra", "gt_sdf"];
const LANDMARK_FILES: [&str; 3] = ["landmarks_pre", "landmarks_intra", "frame_landmarks"];

/// Per-case descriptor written next to the case files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub side: Side,
    pub seed: u64,
    /// Role → file name relative to the case directory.
    pub files: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub dir: String,
    pub side: Side,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub cases: Vec<CohortEntry>,
}

fn volume_for<'a>(case: &'a Case, role: &str) -> &'a Volume {
    match role {
        "pmri" => &case.pmri,
        "imri" => &case.imri,
        "half_mask" => &case.half_mask,
        "mask_pre" => &case.mask_pre,
        "gt_disp" => &case.gt_disp,
        "gt_mask_intra" => &case.gt_mask_intra,
        _ => &case.gt_sdf,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_case(case: &Case, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = std::collections::BTreeMap::new();
    for role in VOLUME_FILES {
        let name = format!("{role}.nii");
        write_nifti(volume_for(case, role), dir.join(&name))?;
        files.insert(role.to_string(), name);
    }
    for (role, set) in LANDMARK_FILES.iter().zip([&case.landmarks_pre, &case.landmarks_intra, &case.frame_landmarks]) {
        let name = format!("{role}.json");
        set.write(dir.join(&name))?;
        files.insert(role.to_string(), name);
    }
    write_json(&CaseManifest { side: case.side, seed: case.seed, files }, &dir.join("case.json"))
}

pub fn read_case(dir: impl AsRef<Path>) -> Result<Case> {
    let dir = dir.as_ref();
    let m: CaseManifest = read_json(&dir.join("case.json"))?;
    let file = |role: &str| -> Result<PathBuf> {
        m.files
            .get(role)
            .map(|f| dir.join(f))
            .ok_or_else(|| Error::Cohort(format!("{}: no file for role '{role}'", dir.display())))
    };
    let vol = |role: &str| read_nifti(file(role)?);
    let lms = |role: &str| LandmarkSet::read(file(role)?);
    Ok(Case {
        pmri: vol("pmri")?,
        imri: vol("imri")?,
        half_mask: vol("half_mask")?,
        mask_pre: vol("mask_pre")?,
        gt_disp: vol("gt_disp")?,
        gt_mask_intra: vol("gt_mask_intra")?,
        gt_sdf: vol("gt_sdf")?,
        landmarks_pre: lms("landmarks_pre")?,
        landmarks_intra: lms("landmarks_intra")?,
        frame_landmarks: lms("frame_landmarks")?,
        side: m.side,
        seed: m.seed,
    })
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Writes every case into `dir/case_NNN/` plus `dir/manifest.json`.
pub fn write_cohort(cases: &[Case], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut entries = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let id = case_id(i);
        write_case(case, dir.join(&id))?;
        entries.push(CohortEntry { dir: id.clone(), id, side: case.side, seed: case.seed });
    }
    write_json(&CohortManifest { cases: entries }, &dir.join("manifest.json"))
}

pub fn read_cohort(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let m: CohortManifest = read_json(&dir.join("manifest.json"))?;
    if m.cases.is_empty() {
        return Err(Error::Cohort(format!("{}: manifest lists no cases", dir.display())));
    }
    m.cases.iter().map(|e| read_case(dir.join(&e.dir))).collect()
}
