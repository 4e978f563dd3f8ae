//! Single-file NIfTI-1 (`.nii`) reader and writer for 3D scalar volumes.
//!
//! Supported voxel types: uint8 (2), int16 (4), float32 (16), float64 (64).
//! No extensions, no compression. Volume axis 0 is NIfTI `x` (`dim[1]`),
//! axis 1 is `y`, axis 2 is `z`; the file stores `x` fastest.

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::Volume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
/// NIFTI_UNITS_MM
const UNITS_MM: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The header fields this codec reads or writes.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub endian: Endian,
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
}

fn bitpix_of(datatype: i16) -> Option<i16> {
    match datatype {
        DT_UINT8 => Some(8),
        DT_INT16 => Some(16),
        DT_FLOAT32 => Some(32),
        DT_FLOAT64 => Some(64),
        _ => None,
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Nifti(msg.into())
}

impl NiftiHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(bad(format!(
                "stream is {} bytes, shorter than the {HEADER_SIZE}-byte header",
                bytes.len()
            )));
        }
        let endian = if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
            Endian::Little
        } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
            Endian::Big
        } else {
            return Err(bad("sizeof_hdr is not 348 in either byte order"));
        };
        match endian {
            Endian::Little => Self::parse_with::<LittleEndian>(bytes, endian),
            Endian::Big => Self::parse_with::<BigEndian>(bytes, endian),
        }
    }

    fn parse_with<B: ByteOrder>(bytes: &[u8], endian: Endian) -> Result<Self> {
        let mut dim = [0i16; 8];
        B::read_i16_into(&bytes[OFF_DIM..OFF_DIM + 16], &mut dim);
        let mut pixdim = [0f32; 8];
        B::read_f32_into(&bytes[OFF_PIXDIM..OFF_PIXDIM + 32], &mut pixdim);
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[OFF_MAGIC..OFF_MAGIC + 4]);
        Ok(NiftiHeader {
            endian,
            sizeof_hdr: B::read_i32(bytes),
            dim,
            datatype: B::read_i16(&bytes[OFF_DATATYPE..]),
            bitpix: B::read_i16(&bytes[OFF_BITPIX..]),
            pixdim,
            vox_offset: B::read_f32(&bytes[OFF_VOX_OFFSET..]),
            scl_slope: B::read_f32(&bytes[OFF_SCL_SLOPE..]),
            scl_inter: B::read_f32(&bytes[OFF_SCL_INTER..]),
            magic,
        })
    }

    fn validate(&self) -> Result<([usize; 3], usize)> {
        if self.magic != MAGIC {
            return Err(bad(format!(
                "bad magic {:?} (expected \"n+1\\0\")",
                String::from_utf8_lossy(&self.magic)
            )));
        }
        if self.dim[0] != 3 {
            return Err(bad(format!(
                "only 3D volumes are supported, dim[0] = {}",
                self.dim[0]
            )));
        }
        let mut dims = [0usize; 3];
        for (i, d) in dims.iter_mut().enumerate() {
            let v = self.dim[i + 1];
            if v <= 0 {
                return Err(bad(format!("dim[{}] = {v} is not positive", i + 1)));
            }
            *d = v as usize;
        }
        let expected = bitpix_of(self.datatype)
            .ok_or_else(|| bad(format!("unsupported datatype code {}", self.datatype)))?;
        if self.bitpix != expected {
            return Err(bad(format!(
                "bitpix {} inconsistent with datatype {} (expected {expected})",
                self.bitpix, self.datatype
            )));
        }
        let off = self.vox_offset;
        if !(off.is_finite() && off >= HEADER_SIZE as f32 && off.fract() == 0.0) {
            return Err(bad(format!("invalid vox_offset {off}")));
        }
        Ok((dims, off as usize))
    }
}

/// Parses a single-file NIfTI-1 stream. Stored values are scaled by
/// `scl_slope * v + scl_inter` when the slope is non-zero.
pub fn read_nifti(bytes: &[u8], source_id: impl Into<String>) -> Result<Volume> {
    let hdr = NiftiHeader::parse(bytes)?;
    let (dims, offset) = hdr.validate()?;
    let n = dims.iter().product::<usize>();
    let width = hdr.bitpix as usize / 8;
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(bad(format!(
            "data section truncated: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    let data = &bytes[offset..end];
    let raw: Vec<f64> = match hdr.endian {
        Endian::Little => decode::<LittleEndian>(data, hdr.datatype, n),
        Endian::Big => decode::<BigEndian>(data, hdr.datatype, n),
    };
    let (slope, inter) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let [nx, ny, nz] = dims;
    let mut voxels = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = raw[(z * ny + y) * nx + x];
                voxels[(x * ny + y) * nz + z] = if scale { slope * v + inter } else { v };
            }
        }
    }
    let spacing = [hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]].map(f64::from);
    Volume::new(Tensor::new(dims.to_vec(), voxels)?, spacing, source_id)
}

fn decode<B: ByteOrder>(data: &[u8], datatype: i16, n: usize) -> Vec<f64> {
    match datatype {
        DT_UINT8 => data.iter().map(|&b| b as f64).collect(),
        DT_INT16 => {
            let mut v = vec![0i16; n];
            B::read_i16_into(data, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        DT_FLOAT32 => {
            let mut v = vec![0f32; n];
            B::read_f32_into(data, &mut v);
            v.into_iter().map(f64::from).collect()
        }
        _ => {
            let mut v = vec![0f64; n];
            B::read_f64_into(data, &mut v);
            v
        }
    }
}

/// Little-endian float32 single-file stream with `vox_offset = 352`, unit
/// scaling and millimetre units. Voxels are narrowed to `f32`.
pub fn write_nifti(v: &Volume) -> Result<Vec<u8>> {
    let dims = v.dims();
    if let Some(&d) = dims.iter().find(|&&d| d > i16::MAX as usize) {
        return Err(bad(format!(
            "extent {d} does not fit the NIfTI-1 dim field"
        )));
    }
    let n = dims.iter().product::<usize>();
    let mut out = vec![0u8; VOX_OFFSET + 4 * n];
    let h = &mut out[..HEADER_SIZE];
    LittleEndian::write_i32(h, HEADER_SIZE as i32);
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for i in 0..3 {
        dim[i + 1] = dims[i] as i16;
    }
    LittleEndian::write_i16_into(&dim, &mut h[OFF_DIM..OFF_DIM + 16]);
    LittleEndian::write_i16(&mut h[OFF_DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut h[OFF_BITPIX..], 32);
    let s = v.spacing_mm();
    let pixdim = [
        1.0,
        s[0] as f32,
        s[1] as f32,
        s[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    LittleEndian::write_f32_into(&pixdim, &mut h[OFF_PIXDIM..OFF_PIXDIM + 32]);
    LittleEndian::write_f32(&mut h[OFF_VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[OFF_SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[OFF_SCL_INTER..], 0.0);
    h[OFF_XYZT_UNITS] = UNITS_MM;
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&MAGIC);

    let [nx, ny, nz] = dims;
    let vox = v.voxels().data();
    let body = &mut out[VOX_OFFSET..];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let k = (z * ny + y) * nx + x;
                let val = vox[(x * ny + y) * nz + z] as f32;
                LittleEndian::write_f32(&mut body[4 * k..4 * k + 4], val);
            }
        }
    }
    Ok(out)
}
