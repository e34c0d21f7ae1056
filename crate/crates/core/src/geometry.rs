//! Rigid transforms, the AC-PC-IH anatomical frame, landmark-based rigid
//! fitting and resampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{point, vec3, Geometry, Point3, Volume};

/// Landmark names understood by the toolkit: the frame landmarks plus the
/// ten evaluation landmarks.
pub const LANDMARK_NAMES: [&str; 13] =
    ["AC", "PC", "IH", "P1L", "P1R", "P2L", "P2R", "P3", "P4L", "P4R", "P5", "P6L", "P6R"];

/// `p -> rotation * p + translation`, in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) {
            return Err(Error::DegenerateConfiguration(format!(
                "rotation is not proper orthonormal (|RᵀR - I| = {ortho:.2e}, det = {det:.6})"
            )));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn translation(t: Point3) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: vec3(t) }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        point(&(self.rotation * vec3(p) + self.translation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub pos_mm: Point3,
}

/// Named world-space points with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for lm in &entries {
            if !LANDMARK_NAMES.contains(&lm.name.as_str()) {
                return Err(Error::UnknownLandmark(lm.name.clone()));
            }
            if !seen.insert(lm.name.as_str()) {
                return Err(Error::DuplicateLandmark(lm.name.clone()));
            }
            if lm.pos_mm.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateConfiguration(format!("landmark {} has a non-finite position", lm.name)));
            }
        }
        Ok(LandmarkSet { entries })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Point3)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(n, p)| Landmark { name: n.to_string(), pos_mm: p }).collect())
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<Point3> {
        self.entries.iter().find(|l| l.name == name).map(|l| l.pos_mm)
    }

    pub fn require(&self, name: &str) -> Result<Point3> {
        self.get(name).ok_or_else(|| Error::MissingLandmark(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|l| l.name.as_str())
    }

    /// Applies `f` to every position, keeping names.
    pub fn map_positions(&self, mut f: impl FnMut(Point3) -> Point3) -> LandmarkSet {
        LandmarkSet {
            entries: self.entries.iter().map(|l| Landmark { name: l.name.clone(), pos_mm: f(l.pos_mm) }).collect(),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> LandmarkSet {
        self.map_positions(|p| t.apply(p))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("landmarks serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<Landmark> = serde_json::from_str(text).map_err(|e| Error::json("landmark file", e))?;
        Self::new(entries)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// World-to-frame transform of the AC-PC-IH coordinate system.
///
/// Origin at AC, +y along PC→AC, +z along the part of AC→IH orthogonal to
/// +y, +x = y × z.
pub fn acpc_frame(ac: Point3, pc: Point3, ih: Point3) -> Result<RigidTransform> {
    let ac = vec3(ac);
    let y = ac - vec3(pc);
    let y_norm = y.norm();
    if !(y_norm > 1e-6) {
        return Err(Error::CollinearLandmarks { norm: 0.0 });
    }
    let y = y / y_norm;
    let up = vec3(ih) - ac;
    let z = up - y * up.dot(&y);
    let z_norm = z.norm();
    if !(z_norm >= 1e-6) {
        return Err(Error::CollinearLandmarks { norm: z_norm });
    }
    let z = z / z_norm;
    let x = y.cross(&z);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(RigidTransform { rotation, translation: -(rotation * ac) })
}

/// Least-squares rigid map taking `src` landmarks onto the same-named `dst` landmarks.
pub fn fit_rigid(src: &LandmarkSet, dst: &LandmarkSet) -> Result<RigidTransform> {
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> =
        src.entries().iter().filter_map(|l| dst.get(&l.name).map(|d| (vec3(l.pos_mm), vec3(d)))).collect();
    if pairs.len() < 3 {
        return Err(Error::InsufficientCorrespondences { found: pairs.len() });
    }
    let n = pairs.len() as f64;
    let cs = pairs.iter().fold(Vector3::zeros(), |a, (s, _)| a + s) / n;
    let cd = pairs.iter().fold(Vector3::zeros(), |a, (_, d)| a + d) / n;

    let mut scatter = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (s, d) in &pairs {
        let a = s - cs;
        scatter += a * a.transpose();
        h += a * (d - cd).transpose();
    }
    let ev = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-12 * ev[0].max(1.0)) {
        return Err(Error::DegenerateConfiguration("source landmarks are collinear".into()));
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidTransform { rotation, translation })
}

/// Resamples `vol` onto `target` after moving it by `t` (source world → target world).
pub fn resample(vol: &Volume, t: &RigidTransform, target: &Geometry) -> Result<Volume> {
    target.validate()?;
    let inv = t.inverse();
    let channels = vol.channels();
    let mut buf = vec![0.0; channels];
    Ok(Volume::from_fn(target.clone(), channels, |p, out| {
        vol.trilinear_into(inv.apply(p), &mut buf);
        out.copy_from_slice(&buf);
    }))
}
