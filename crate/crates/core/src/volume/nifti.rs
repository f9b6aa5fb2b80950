//! Minimal NIfTI-1 reader and writer.
//!
//! Single-file 3D volumes only, optionally gzip-wrapped. Orientation fields
//! are ignored; only the grid, voxel spacing and intensity scaling are read.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const NIFTI_HEADER_SIZE: usize = 348;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

mod offsets {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            64 => Ok(NiftiDatatype::Float64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }
}

/// The header fields this reader understands.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub big_endian: bool,
}

impl NiftiHeader {
    /// Header for a 3D single-file volume.
    pub fn for_volume(dims: [usize; 3], spacing: [f64; 3], datatype: NiftiDatatype) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = dims[a] as i16;
        }
        let mut pixdim = [1f32; 8];
        for a in 0..3 {
            pixdim[a + 1] = spacing[a] as f32;
        }
        Self {
            dim,
            datatype: datatype.code(),
            bitpix: (datatype.bytes() * 8) as i16,
            pixdim,
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            magic: *MAGIC_SINGLE,
            big_endian: false,
        }
    }

    pub fn parse(raw: &[u8]) -> Result<Self> {
        if raw.len() < NIFTI_HEADER_SIZE {
            return Err(Error::TruncatedStream { expected: NIFTI_HEADER_SIZE, found: raw.len() });
        }
        let probe = [raw[0], raw[1], raw[2], raw[3]];
        let big_endian = if i32::from_le_bytes(probe) == NIFTI_HEADER_SIZE as i32 {
            false
        } else if i32::from_be_bytes(probe) == NIFTI_HEADER_SIZE as i32 {
            true
        } else {
            return Err(Error::BadMagic("sizeof_hdr is not 348 in either byte order".into()));
        };
        let r = Fields { raw, big_endian };
        let magic = [raw[offsets::MAGIC], raw[offsets::MAGIC + 1], raw[offsets::MAGIC + 2], raw[offsets::MAGIC + 3]];
        if &magic != MAGIC_SINGLE && &magic != MAGIC_PAIR {
            return Err(Error::BadMagic(format!("magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(offsets::DIM + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(offsets::PIXDIM + 4 * i);
        }
        Ok(Self {
            dim,
            datatype: r.i16(offsets::DATATYPE),
            bitpix: r.i16(offsets::BITPIX),
            pixdim,
            vox_offset: r.f32(offsets::VOX_OFFSET),
            scl_slope: r.f32(offsets::SCL_SLOPE),
            scl_inter: r.f32(offsets::SCL_INTER),
            magic,
            big_endian,
        })
    }

    pub fn to_bytes(&self) -> [u8; NIFTI_HEADER_SIZE] {
        let mut out = [0u8; NIFTI_HEADER_SIZE];
        let be = self.big_endian;
        let mut put = |off: usize, bytes: &[u8]| out[off..off + bytes.len()].copy_from_slice(bytes);
        let i32b = |v: i32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        let i16b = |v: i16| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        let f32b = |v: f32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        put(0, &i32b(NIFTI_HEADER_SIZE as i32));
        for (i, d) in self.dim.iter().enumerate() {
            put(offsets::DIM + 2 * i, &i16b(*d));
        }
        put(offsets::DATATYPE, &i16b(self.datatype));
        put(offsets::BITPIX, &i16b(self.bitpix));
        for (i, p) in self.pixdim.iter().enumerate() {
            put(offsets::PIXDIM + 4 * i, &f32b(*p));
        }
        put(offsets::VOX_OFFSET, &f32b(self.vox_offset));
        put(offsets::SCL_SLOPE, &f32b(self.scl_slope));
        put(offsets::SCL_INTER, &f32b(self.scl_inter));
        put(offsets::MAGIC, &self.magic);
        out
    }

    /// Spatial grid from `dim[1..=3]`; higher dimensions must be singleton.
    pub fn grid(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::MalformedHeader(format!("dim[0] = {ndim}")));
        }
        let ndim = ndim as usize;
        let mut grid = [1usize; 3];
        for a in 0..3 {
            if a < ndim {
                let d = self.dim[a + 1];
                if d <= 0 {
                    return Err(Error::NonPositiveDim(format!("dim[{}] = {d}", a + 1)));
                }
                grid[a] = d as usize;
            }
        }
        for a in 3..ndim {
            let d = self.dim[a + 1];
            if d <= 0 {
                return Err(Error::NonPositiveDim(format!("dim[{}] = {d}", a + 1)));
            }
            if d != 1 {
                return Err(Error::UnsupportedLayout(format!("dim[{}] = {d}; only 3D volumes are supported", a + 1)));
            }
        }
        Ok(grid)
    }

    /// Voxel spacing; non-positive or non-finite entries fall back to 1 mm.
    pub fn spacing(&self) -> [f64; 3] {
        [1, 2, 3].map(|i| {
            let p = self.pixdim[i].abs() as f64;
            if p.is_finite() && p > 0.0 {
                p
            } else {
                1.0
            }
        })
    }

    /// Byte offset of the voxel payload in a single stream.
    pub fn data_offset(&self) -> Result<usize> {
        let v = self.vox_offset;
        if !v.is_finite() || !(0.0..=1.0e9).contains(&v) {
            return Err(Error::MalformedHeader(format!("vox_offset = {v}")));
        }
        Ok((v as usize).max(NIFTI_HEADER_SIZE))
    }

    /// `(slope, intercept)` to apply, or identity when `scl_slope` is 0.
    pub fn scaling(&self) -> (f64, f64) {
        let slope = self.scl_slope as f64;
        if slope == 0.0 || !slope.is_finite() {
            (1.0, 0.0)
        } else {
            let inter = self.scl_inter as f64;
            (slope, if inter.is_finite() { inter } else { 0.0 })
        }
    }
}

struct Fields<'a> {
    raw: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.raw[off..off + N]);
        b
    }

    fn i16(&self, off: usize) -> i16 {
        let b = self.bytes::<2>(off);
        if self.big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }

    fn f32(&self, off: usize) -> f32 {
        let b = self.bytes::<4>(off);
        if self.big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Reads exactly `n` more bytes; a short or cut-off stream is a truncation.
fn read_up_to(reader: &mut impl Read, n: usize, into: &mut Vec<u8>) -> Result<()> {
    let expected = into.len() + n;
    match reader.take(n as u64).read_to_end(into) {
        Err(e) if e.kind() != std::io::ErrorKind::UnexpectedEof => {
            return Err(Error::MalformedHeader(format!("gzip stream: {e}")));
        }
        _ if into.len() < expected => return Err(Error::TruncatedStream { expected, found: into.len() }),
        _ => {}
    }
    Ok(())
}

fn payload_len(header: &NiftiHeader, grid: [usize; 3]) -> Result<usize> {
    let dt = NiftiDatatype::from_code(header.datatype)?;
    if header.bitpix as usize != dt.bytes() * 8 {
        return Err(Error::MalformedHeader(format!(
            "bitpix {} does not match datatype {}",
            header.bitpix, header.datatype
        )));
    }
    grid.iter()
        .try_fold(dt.bytes(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::NonPositiveDim(format!("{grid:?} overflows")))
}

/// Decodes a NIfTI-1 byte stream (plain or gzip) into a volume.
pub fn load_nifti(bytes: &[u8]) -> Result<Volume> {
    if is_gzip(bytes) {
        let mut dec = GzDecoder::new(bytes);
        let mut buf = Vec::new();
        read_up_to(&mut dec, NIFTI_HEADER_SIZE, &mut buf)?;
        let header = NiftiHeader::parse(&buf)?;
        let grid = header.grid()?;
        let need = header
            .data_offset()?
            .checked_add(payload_len(&header, grid)?)
            .ok_or_else(|| Error::NonPositiveDim("payload overflows".into()))?;
        read_up_to(&mut dec, need - NIFTI_HEADER_SIZE, &mut buf)?;
        // Drain to the end so a cut-off trailer or CRC mismatch is caught.
        match std::io::copy(&mut dec, &mut std::io::sink()) {
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Err(Error::TruncatedStream { expected: need, found: buf.len() });
            }
            Err(e) => return Err(Error::MalformedHeader(format!("gzip stream: {e}"))),
            Ok(_) => {}
        }
        decode_with_header(&header, grid, &buf)
    } else {
        let header = NiftiHeader::parse(bytes)?;
        let grid = header.grid()?;
        decode_with_header(&header, grid, bytes)
    }
}

pub fn load_nifti_path(path: impl AsRef<Path>) -> Result<Volume> {
    load_nifti(&std::fs::read(path)?)
}

fn decode_with_header(header: &NiftiHeader, grid: [usize; 3], stream: &[u8]) -> Result<Volume> {
    let dt = NiftiDatatype::from_code(header.datatype)?;
    let offset = header.data_offset()?;
    let len = payload_len(header, grid)?;
    let end = offset.checked_add(len).ok_or_else(|| Error::NonPositiveDim("payload overflows".into()))?;
    if stream.len() < end {
        return Err(Error::TruncatedStream { expected: end, found: stream.len() });
    }
    let payload = &stream[offset..end];
    let be = header.big_endian;
    let (slope, inter) = header.scaling();
    let raw: Vec<f64> = match dt {
        NiftiDatatype::Uint8 => payload.iter().map(|&b| b as f64).collect(),
        NiftiDatatype::Int16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            })
            .collect(),
        NiftiDatatype::Float32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                (if be { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            })
            .collect(),
        NiftiDatatype::Float64 => payload
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                if be { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) }
            })
            .collect(),
    };
    let data = raw.into_iter().map(|v| (slope * v + inter) as f32).collect();
    Volume::new(grid, header.spacing(), data)
}

/// Encodes a volume as an uncompressed little-endian float32 `.nii` stream.
pub fn encode_nifti(vol: &Volume) -> Result<Vec<u8>> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::UnsupportedLayout(format!("{dims:?} exceeds NIfTI-1 limits")));
    }
    let header = NiftiHeader::for_volume(dims, vol.spacing(), NiftiDatatype::Float32);
    let mut out = Vec::with_capacity(DEFAULT_VOX_OFFSET + 4 * vol.len());
    out.extend_from_slice(&header.to_bytes());
    out.resize(DEFAULT_VOX_OFFSET, 0);
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(header: &NiftiHeader, payload: &[u8]) -> Vec<u8> {
        let mut out = header.to_bytes().to_vec();
        out.resize(header.data_offset().unwrap(), 0);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn minimal_float32_file() {
        let header = NiftiHeader::for_volume([4, 4, 4], [1.0; 3], NiftiDatatype::Float32);
        let payload: Vec<u8> = (0..64).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let v = load_nifti(&file(&header, &payload)).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert_eq!(v.data()[63], 63.0);
    }

    #[test]
    fn slope_and_intercept() {
        let mut header = NiftiHeader::for_volume([1, 1, 1], [1.0; 3], NiftiDatatype::Uint8);
        header.scl_slope = 2.0;
        header.scl_inter = 1.0;
        let v = load_nifti(&file(&header, &[3])).unwrap();
        assert_eq!(v.data(), &[7.0]);
        header.scl_slope = 0.0;
        let v = load_nifti(&file(&header, &[3])).unwrap();
        assert_eq!(v.data(), &[3.0]);
    }

    #[test]
    fn bad_magic_and_sizeof() {
        let header = NiftiHeader::for_volume([1, 1, 1], [1.0; 3], NiftiDatatype::Uint8);
        let mut f = file(&header, &[0]);
        f[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"abcd");
        assert!(matches!(load_nifti(&f), Err(Error::BadMagic(_))));
        let mut f = file(&header, &[0]);
        f[0] = 0;
        assert!(matches!(load_nifti(&f), Err(Error::BadMagic(_))));
    }

    #[test]
    fn truncated_and_unsupported() {
        let header = NiftiHeader::for_volume([2, 2, 2], [1.0; 3], NiftiDatatype::Int16);
        let f = file(&header, &[0; 15]);
        assert!(matches!(load_nifti(&f), Err(Error::TruncatedStream { .. })));
        assert!(matches!(load_nifti(&f[..100]), Err(Error::TruncatedStream { .. })));
        let mut h = header.clone();
        h.datatype = 8;
        h.bitpix = 32;
        assert!(matches!(load_nifti(&file(&h, &[0; 32])), Err(Error::UnsupportedDatatype(8))));
        let mut h = header.clone();
        h.dim[2] = 0;
        assert!(matches!(load_nifti(&file(&h, &[])), Err(Error::NonPositiveDim(_))));
        let mut h = header;
        h.dim[0] = 4;
        h.dim[4] = 2;
        assert!(matches!(load_nifti(&file(&h, &[0; 32])), Err(Error::UnsupportedLayout(_))));
    }

    #[test]
    fn writer_round_trip() {
        let v = Volume::from_fn([3, 2, 5], [0.5, 2.0, 1.5], |x, y, z| (x + 10 * y + 100 * z) as f32 * 0.25).unwrap();
        let back = load_nifti(&encode_nifti(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
