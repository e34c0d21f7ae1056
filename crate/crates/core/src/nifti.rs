//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Supported: little-endian, uncompressed, `float32` or `uint8` voxels,
//! scalar volumes (`dim[0] = 3`) and vector fields (`dim[0] = 5`,
//! `dim[4] = 1`, `dim[5] = channels`, intent code 1007). Geometry travels in
//! the sform; files with only a qform or neither fall back to `pixdim` with an
//! identity direction.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume, IDENTITY};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";
pub const INTENT_VECTOR: i16 = 1007;
pub const DT_UINT8: i16 = 2;
pub const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DataType {
    #[default]
    Float32,
    Uint8,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::Float32 => DT_FLOAT32,
            DataType::Uint8 => DT_UINT8,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            DataType::Float32 => 32,
            DataType::Uint8 => 8,
        }
    }
}

/// The header fields this crate reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub srow: [[f32; 4]; 3],
}

impl Header {
    pub fn parse(buf: &[u8]) -> Result<Header> {
        if buf.len() < HEADER_SIZE {
            return Err(Error::DimensionMismatch { field: "sizeof_hdr", detail: format!("file is only {} bytes", buf.len()) });
        }
        let i32_at = |o: usize| i32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let i16_at = |o: usize| i16::from_le_bytes(buf[o..o + 2].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());

        let sizeof_hdr = i32_at(0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::MalformedHeaderSize { found: sizeof_hdr });
        }
        let magic: [u8; 4] = buf[344..348].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::MalformedMagic { found: magic });
        }
        let mut dim = [0i16; 8];
        let mut pixdim = [0f32; 8];
        for i in 0..8 {
            dim[i] = i16_at(40 + 2 * i);
            pixdim[i] = f32_at(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        Ok(Header {
            dim,
            intent_code: i16_at(68),
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim,
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            xyzt_units: buf[123],
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            srow,
        })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        b[38] = b'r';
        for i in 0..8 {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&self.dim[i].to_le_bytes());
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&self.pixdim[i].to_le_bytes());
        }
        b[68..70].copy_from_slice(&self.intent_code.to_le_bytes());
        b[70..72].copy_from_slice(&self.datatype.to_le_bytes());
        b[72..74].copy_from_slice(&self.bitpix.to_le_bytes());
        b[108..112].copy_from_slice(&self.vox_offset.to_le_bytes());
        b[112..116].copy_from_slice(&self.scl_slope.to_le_bytes());
        b[116..120].copy_from_slice(&self.scl_inter.to_le_bytes());
        b[123] = self.xyzt_units;
        b[252..254].copy_from_slice(&self.qform_code.to_le_bytes());
        b[254..256].copy_from_slice(&self.sform_code.to_le_bytes());
        for r in 0..3 {
            for c in 0..4 {
                let o = 280 + 16 * r + 4 * c;
                b[o..o + 4].copy_from_slice(&self.srow[r][c].to_le_bytes());
            }
        }
        b[344..348].copy_from_slice(&MAGIC);
        b
    }

    /// Spatial dims and channel count implied by `dim[]`.
    fn layout(&self) -> Result<([usize; 3], usize)> {
        let dim = self.dim;
        let ndim = dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::DimensionMismatch { field: "dim[0]", detail: format!("value {ndim} not in 1..=7") });
        }
        let get = |i: usize| -> Result<usize> {
            if i as i16 > ndim {
                return Ok(1);
            }
            if dim[i] < 1 {
                return Err(Error::DimensionMismatch { field: DIM_NAMES[i], detail: format!("value {} must be >= 1", dim[i]) });
            }
            Ok(dim[i] as usize)
        };
        let spatial = [get(1)?, get(2)?, get(3)?];
        if get(4)? != 1 {
            return Err(Error::DimensionMismatch { field: "dim[4]", detail: format!("time series (dim[4]={}) unsupported", dim[4]) });
        }
        let channels = get(5)?;
        if ndim > 5 && (get(6)? != 1 || get(7)? != 1) {
            return Err(Error::DimensionMismatch { field: "dim[6]", detail: "dims beyond 5 must be 1".into() });
        }
        Ok((spatial, channels))
    }

    fn geometry(&self, dims: [usize; 3]) -> Result<Geometry> {
        if self.sform_code > 0 {
            let mut spacing = [0.0; 3];
            let mut direction = [[0.0; 3]; 3];
            for c in 0..3 {
                let col = [0, 1, 2].map(|r| self.srow[r][c] as f64);
                let n = (col[0] * col[0] + col[1] * col[1] + col[2] * col[2]).sqrt();
                if !(n > 0.0) {
                    return Err(Error::DimensionMismatch { field: "srow", detail: format!("column {c} of the sform is zero") });
                }
                spacing[c] = n;
                for r in 0..3 {
                    direction[r][c] = col[r] / n;
                }
            }
            let origin = [0, 1, 2].map(|r| self.srow[r][3] as f64);
            // the sform is stored in float32, so orthonormality only holds to ~1e-7
            let direction = orthonormalize(direction);
            Geometry::new(dims, spacing, origin, direction)
        } else {
            let spacing = [1, 2, 3].map(|i| {
                let s = self.pixdim[i].abs() as f64;
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            });
            Geometry::new(dims, spacing, [0.0; 3], IDENTITY)
        }
    }
}

const DIM_NAMES: [&str; 8] = ["dim[0]", "dim[1]", "dim[2]", "dim[3]", "dim[4]", "dim[5]", "dim[6]", "dim[7]"];

fn orthonormalize(d: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let m = nalgebra::Matrix3::from_fn(|r, c| d[r][c]);
    let svd = m.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return d;
    };
    let q = u * vt;
    [0, 1, 2].map(|r| [0, 1, 2].map(|c| q[(r, c)]))
}

/// Header describing `vol` when written with `dtype`.
pub fn header_for(vol: &Volume, dtype: DataType) -> Header {
    let g = vol.geometry();
    let channels = vol.channels();
    let mut dim = [1i16; 8];
    let mut intent_code = 0;
    if channels == 1 {
        dim[0] = 3;
    } else {
        dim[0] = 5;
        dim[5] = channels as i16;
        intent_code = INTENT_VECTOR;
    }
    for i in 0..3 {
        dim[i + 1] = g.dims[i] as i16;
    }
    let mut pixdim = [0f32; 8];
    pixdim[0] = 1.0;
    for i in 0..3 {
        pixdim[i + 1] = g.spacing[i] as f32;
    }
    for p in pixdim.iter_mut().skip(4) {
        *p = 1.0;
    }
    let a = g.affine();
    let srow = [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| a[r][c] as f32));
    Header {
        dim,
        intent_code,
        datatype: dtype.code(),
        bitpix: dtype.bitpix(),
        pixdim,
        vox_offset: VOX_OFFSET as f32,
        scl_slope: 1.0,
        scl_inter: 0.0,
        xyzt_units: 2, // mm
        qform_code: 0,
        sform_code: 1,
        srow,
    }
}

pub fn encode(vol: &Volume, dtype: DataType) -> Vec<u8> {
    let header = header_for(vol, dtype);
    let elem = (dtype.bitpix() / 8) as usize;
    let mut out = Vec::with_capacity(VOX_OFFSET + vol.data().len() * elem);
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; VOX_OFFSET - HEADER_SIZE]);
    match dtype {
        DataType::Float32 => {
            for &v in vol.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DataType::Uint8 => out.extend(vol.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
    }
    out
}

pub fn decode(buf: &[u8]) -> Result<Volume> {
    let header = Header::parse(buf)?;
    let (dims, channels) = header.layout()?;
    if header.dim[0] == 5 && header.intent_code != INTENT_VECTOR && channels > 1 {
        return Err(Error::DimensionMismatch {
            field: "intent_code",
            detail: format!("vector image must use intent {INTENT_VECTOR}, found {}", header.intent_code),
        });
    }
    let elem = match header.datatype {
        DT_FLOAT32 => 4,
        DT_UINT8 => 1,
        code => return Err(Error::UnsupportedDatatype { code }),
    };
    if header.bitpix as usize != elem * 8 {
        return Err(Error::DimensionMismatch { field: "bitpix", detail: format!("{} does not match datatype", header.bitpix) });
    }
    let offset = header.vox_offset as usize;
    if offset < HEADER_SIZE {
        return Err(Error::DimensionMismatch { field: "vox_offset", detail: format!("{offset} < {HEADER_SIZE}") });
    }
    let count = dims[0] * dims[1] * dims[2] * channels;
    let needed = offset + count * elem;
    if buf.len() < needed {
        return Err(Error::DimensionMismatch {
            field: "dim",
            detail: format!("header implies {needed} bytes, file has {}", buf.len()),
        });
    }
    let payload = &buf[offset..needed];
    let mut data: Vec<f64> = match header.datatype {
        DT_FLOAT32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => payload.iter().map(|&b| b as f64).collect(),
    };
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    let geom = header.geometry(dims)?;
    Volume::new(geom, channels, data)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Writes `vol` as float32.
pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_nifti_as(vol, path, DataType::Float32)
}

pub fn write_nifti_as(vol: &Volume, path: impl AsRef<Path>, dtype: DataType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(vol, dtype)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_f32_volume(seed: u64, dims: [usize; 3], channels: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let m = rot.matrix();
        let dir = [0, 1, 2].map(|r| [0, 1, 2].map(|c| m[(r, c)]));
        let g = Geometry::new(dims, [0.9, 1.25, 2.0], [-12.5, 30.0, 4.75], dir).unwrap();
        let n = g.n_voxels() * channels;
        let data = (0..n).map(|_| rng.gen_range(-100.0f32..100.0) as f64).collect();
        Volume::new(g, channels, data).unwrap()
    }

    #[test]
    fn header_constants() {
        let vol = random_f32_volume(1, [3, 4, 5], 1);
        let bytes = encode(&vol, DataType::Float32);
        assert_eq!(i32::from_le_bytes(bytes[0..4].try_into().unwrap()), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_eq!(f32::from_le_bytes(bytes[108..112].try_into().unwrap()), 352.0);
        assert_eq!(bytes.len(), 352 + 60 * 4);
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let vol = random_f32_volume(2, [6, 6, 6], 1);
        let back = decode(&encode(&vol, DataType::Float32)).unwrap();
        assert_eq!(back.data(), vol.data());
        assert!(back.geometry().approx_eq(vol.geometry(), 1e-6));
    }

    #[test]
    fn vector_header_layout() {
        let vol = random_f32_volume(3, [4, 4, 4], 3);
        let bytes = encode(&vol, DataType::Float32);
        let h = Header::parse(&bytes).unwrap();
        assert_eq!(&h.dim[..6], &[5, 4, 4, 4, 1, 3]);
        assert_eq!(h.intent_code, INTENT_VECTOR);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.data(), vol.data());
    }

    #[test]
    fn uint8_round_trip() {
        let g = Geometry::centered([3, 3, 3], [1.0; 3]).unwrap();
        let data: Vec<f64> = (0..27).map(|i| (i % 2) as f64).collect();
        let vol = Volume::new(g, 1, data).unwrap();
        let bytes = encode(&vol, DataType::Uint8);
        assert_eq!(bytes.len(), 352 + 27);
        assert_eq!(decode(&bytes).unwrap().data(), vol.data());
    }

    #[test]
    fn rejects_bad_magic() {
        let vol = random_f32_volume(4, [2, 2, 2], 1);
        let mut bytes = encode(&vol, DataType::Float32);
        bytes[344..348].copy_from_slice(b"bad\0");
        assert!(matches!(decode(&bytes), Err(Error::MalformedMagic { .. })));
    }

    #[test]
    fn rejects_unsupported_dtype_and_truncation() {
        let vol = random_f32_volume(5, [2, 2, 2], 1);
        let mut bytes = encode(&vol, DataType::Float32);
        bytes[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDatatype { code: 64 })));

        let bytes = encode(&vol, DataType::Float32);
        let err = decode(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { field: "dim", .. }), "{err}");

        let mut bytes = encode(&vol, DataType::Float32);
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&2i16.to_le_bytes()); // dim[4] = 2
        assert!(matches!(decode(&bytes), Err(Error::DimensionMismatch { field: "dim[4]", .. })));
    }

    #[test]
    fn header_without_sform_uses_pixdim() {
        let g = Geometry::axis_aligned([2, 2, 2], [1.5, 2.0, 3.0], [9.0, 9.0, 9.0]).unwrap();
        let vol = Volume::zeros(g, 1);
        let mut h = header_for(&vol, DataType::Float32);
        h.sform_code = 0;
        let mut bytes = h.to_bytes().to_vec();
        bytes.extend_from_slice(&[0u8; 4 + 8 * 4]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.geometry().spacing, [1.5, 2.0, 3.0]);
        assert_eq!(back.geometry().origin, [0.0; 3]);
    }
}
