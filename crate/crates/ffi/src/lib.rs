//! C ABI over the brainshift library.
//!
//! Objects are opaque heap handles created by `bs_*` constructors and released
//! with the matching `*_free`. Every fallible call returns a [`BsStatus`]; on
//! failure [`bs_last_error_message`] describes the error for the calling thread.
//! Volumes are channel-planar with x fastest.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use brainshift::ffd::{read_cpp, write_cpp, FfdGrid};
use brainshift::network::{predict, read_checkpoint, write_checkpoint, NetParams};
use brainshift::nifti::{read_nifti, write_nifti};
use brainshift::shape::signed_distance;
use brainshift::synth::{warp_mask, warp_volume};
use brainshift::{Error, Geometry, Volume};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Geometry = 5,
    OutsideSupport = 6,
    CheckpointShape = 7,
    CheckpointFormat = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Image volume handle.
pub struct BsVolume {
    inner: Volume,
}

/// B-spline control lattice handle.
pub struct BsFfdGrid {
    inner: FfdGrid,
}

/// Network parameter handle.
pub struct BsModel {
    inner: NetParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> BsStatus {
    match err {
        Error::Io { .. } => BsStatus::Io,
        Error::MalformedMagic { .. }
        | Error::MalformedHeaderSize { .. }
        | Error::UnsupportedDatatype { .. }
        | Error::DimensionMismatch { .. }
        | Error::NotVectorField { .. }
        | Error::Json { .. } => BsStatus::Format,
        Error::GeometryMismatch(_) | Error::DimsNotDivisible { .. } => BsStatus::Geometry,
        Error::OutsideSupport { .. } => BsStatus::OutsideSupport,
        Error::CheckpointShape(_) => BsStatus::CheckpointShape,
        Error::CheckpointFormat(_) => BsStatus::CheckpointFormat,
        _ => BsStatus::InvalidArgument,
    }
}

struct Fail(BsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), format!("error[{}]: {e}", e.code()))
    }
}

fn null(what: &str) -> Fail {
    Fail(BsStatus::NullPointer, format!("null pointer: {what}"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BsStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail(BsStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `bs_*` call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Axis-aligned volume with `channels * dims[0] * dims[1] * dims[2]` values copied from `data`.
///
/// # Safety
/// `dims`, `spacing` and `origin` point to 3 values; `data` to the full payload.
#[no_mangle]
pub unsafe extern "C" fn bs_volume_new(
    dims: *const usize,
    spacing: *const f64,
    origin: *const f64,
    channels: usize,
    data: *const f64,
    out: *mut *mut BsVolume,
) -> BsStatus {
    guard(|| {
        if dims.is_null() || spacing.is_null() || origin.is_null() || data.is_null() {
            return Err(null("volume argument"));
        }
        let d = [*dims, *dims.add(1), *dims.add(2)];
        let s = [*spacing, *spacing.add(1), *spacing.add(2)];
        let o = [*origin, *origin.add(1), *origin.add(2)];
        let geom = Geometry::axis_aligned(d, s, o)?;
        let n = channels.checked_mul(geom.n_voxels()).ok_or_else(|| Fail(BsStatus::InvalidArgument, "volume too large".into()))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        emit(out, BsVolume { inner: Volume::new(geom, channels, values)? })
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_volume_read_nifti(path: *const c_char, out: *mut *mut BsVolume) -> BsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        emit(out, BsVolume { inner: read_nifti(p)? })
    })
}

/// # Safety
/// `vol` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_volume_write_nifti(vol: *const BsVolume, path: *const c_char) -> BsStatus {
    guard(|| {
        let v = handle(vol, "volume")?;
        Ok(write_nifti(&v.inner, path_arg(path, "path")?)?)
    })
}

/// Writes the grid size to `dims[0..3]` and the channel count to `channels`.
///
/// # Safety
/// `vol` is a live handle; `dims` holds 3 values.
#[no_mangle]
pub unsafe extern "C" fn bs_volume_shape(vol: *const BsVolume, dims: *mut usize, channels: *mut usize) -> BsStatus {
    guard(|| {
        let v = handle(vol, "volume")?;
        if dims.is_null() || channels.is_null() {
            return Err(null("shape output"));
        }
        let d = v.inner.dims();
        for (a, &n) in d.iter().enumerate() {
            *dims.add(a) = n;
        }
        *channels = v.inner.channels();
        Ok(())
    })
}

/// Copies the voxel data into `buf` (`len` values).
///
/// # Safety
/// `vol` is a live handle; `buf` holds `len` values.
#[no_mangle]
pub unsafe extern "C" fn bs_volume_copy_data(vol: *const BsVolume, buf: *mut f64, len: usize) -> BsStatus {
    guard(|| {
        let v = handle(vol, "volume")?;
        if buf.is_null() {
            return Err(null("buffer"));
        }
        let data = v.inner.data();
        if len < data.len() {
            return Err(Fail(BsStatus::BufferTooSmall, format!("buffer holds {len} values, volume has {}", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `vol` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_volume_free(vol: *mut BsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Signed distance of a binary mask, negative inside, clamped to `cap_mm`.
///
/// # Safety
/// `mask` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_signed_distance(mask: *const BsVolume, cap_mm: f64, out: *mut *mut BsVolume) -> BsStatus {
    guard(|| {
        let m = handle(mask, "mask")?;
        if !(cap_mm > 0.0) {
            return Err(Fail(BsStatus::InvalidArgument, format!("cap_mm must be positive, got {cap_mm}")));
        }
        emit(out, BsVolume { inner: signed_distance(&m.inner, cap_mm) })
    })
}

/// Backward warp of `vol` by the 3-channel field `disp`; thresholded at 0.5 when `is_mask` is nonzero.
///
/// # Safety
/// `vol` and `disp` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_warp(vol: *const BsVolume, disp: *const BsVolume, is_mask: i32, out: *mut *mut BsVolume) -> BsStatus {
    guard(|| {
        let v = handle(vol, "volume")?;
        let d = handle(disp, "displacement")?;
        let w = if is_mask != 0 { warp_mask(&v.inner, &d.inner)? } else { warp_volume(&v.inner, &d.inner)? };
        emit(out, BsVolume { inner: w })
    })
}

/// Lattice with `cp_dims` control points; `displacements` holds xyz triples, x index fastest.
///
/// # Safety
/// `cp_dims`, `cp_spacing`, `cp_origin` point to 3 values; `displacements` to `3 * prod(cp_dims)`.
#[no_mangle]
pub unsafe extern "C" fn bs_ffd_new(
    cp_dims: *const usize,
    cp_spacing: *const f64,
    cp_origin: *const f64,
    displacements: *const f64,
    out: *mut *mut BsFfdGrid,
) -> BsStatus {
    guard(|| {
        if cp_dims.is_null() || cp_spacing.is_null() || cp_origin.is_null() || displacements.is_null() {
            return Err(null("lattice argument"));
        }
        let d = [*cp_dims, *cp_dims.add(1), *cp_dims.add(2)];
        let s = [*cp_spacing, *cp_spacing.add(1), *cp_spacing.add(2)];
        let o = [*cp_origin, *cp_origin.add(1), *cp_origin.add(2)];
        let n = d.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| Fail(BsStatus::InvalidArgument, "lattice too large".into()))?;
        let raw = std::slice::from_raw_parts(displacements, 3 * n);
        let disp = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        emit(out, BsFfdGrid { inner: FfdGrid::new(d, s, o, disp)? })
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_ffd_read_cpp(path: *const c_char, out: *mut *mut BsFfdGrid) -> BsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        emit(out, BsFfdGrid { inner: read_cpp(p)? })
    })
}

/// # Safety
/// `grid` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_ffd_write_cpp(grid: *const BsFfdGrid, path: *const c_char) -> BsStatus {
    guard(|| {
        let g = handle(grid, "grid")?;
        Ok(write_cpp(&g.inner, path_arg(path, "path")?)?)
    })
}

/// Displacement `u(x)` in mm at world point `x`.
///
/// # Safety
/// `grid` is a live handle; `x` and `u` point to 3 values.
#[no_mangle]
pub unsafe extern "C" fn bs_ffd_displacement(grid: *const BsFfdGrid, x: *const f64, u: *mut f64) -> BsStatus {
    guard(|| {
        let g = handle(grid, "grid")?;
        if x.is_null() || u.is_null() {
            return Err(null("point"));
        }
        let d = g.inner.displacement([*x, *x.add(1), *x.add(2)])?;
        for (a, v) in d.iter().enumerate() {
            *u.add(a) = *v;
        }
        Ok(())
    })
}

/// Dense 3-channel displacement on the grid of `reference`.
///
/// # Safety
/// `grid` and `reference` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_ffd_densify(grid: *const BsFfdGrid, reference: *const BsVolume, out: *mut *mut BsVolume) -> BsStatus {
    guard(|| {
        let g = handle(grid, "grid")?;
        let r = handle(reference, "reference")?;
        emit(out, BsVolume { inner: g.inner.densify(r.inner.geometry())? })
    })
}

/// # Safety
/// `grid` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_ffd_free(grid: *mut BsFfdGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Freshly initialized network parameters.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_model_init(seed: u64, out: *mut *mut BsModel) -> BsStatus {
    guard(|| emit(out, BsModel { inner: NetParams::init(seed) }))
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bs_model_load(path: *const c_char, out: *mut *mut BsModel) -> BsStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        emit(out, BsModel { inner: read_checkpoint(p)? })
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bs_model_save(model: *const BsModel, path: *const c_char) -> BsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        Ok(write_checkpoint(&m.inner, path_arg(path, "path")?)?)
    })
}

/// Runs the network on a standardized image and hemisphere indicator.
/// Any of the three outputs may be null to skip it.
///
/// # Safety
/// `model`, `pmri` and `half_mask` are live handles; non-null outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn bs_model_predict(
    model: *const BsModel,
    pmri: *const BsVolume,
    half_mask: *const BsVolume,
    out_disp: *mut *mut BsVolume,
    out_mask: *mut *mut BsVolume,
    out_sdf: *mut *mut BsVolume,
) -> BsStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let p = handle(pmri, "pmri")?;
        let h = handle(half_mask, "half_mask")?;
        let out = predict(&p.inner, &h.inner, &m.inner)?;
        for (slot, vol) in [(out_disp, out.disp), (out_mask, out.mask_prob), (out_sdf, out.sdf)] {
            if !slot.is_null() {
                emit(slot, BsVolume { inner: vol })?;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bs_model_free(model: *mut BsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
