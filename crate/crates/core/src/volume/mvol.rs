//! Native volume format: one text header line
//! `MVOL1 <nx> <ny> <nz> <sx> <sy> <sz>\n` followed by the voxels as
//! little-endian `f32`, x-fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};

pub const MVOL_MAGIC: &str = "MVOL1";
const MAX_HEADER_LINE: usize = 512;

pub fn encode_volume(vol: &Volume) -> Vec<u8> {
    let [nx, ny, nz] = vol.dims();
    let [sx, sy, sz] = vol.spacing();
    let header = format!("{MVOL_MAGIC} {nx} {ny} {nz} {sx} {sy} {sz}\n");
    let mut out = Vec::with_capacity(header.len() + 4 * vol.len());
    out.extend_from_slice(header.as_bytes());
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let limit = bytes.len().min(MAX_HEADER_LINE);
    let newline = bytes[..limit]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| {
            if bytes.starts_with(MVOL_MAGIC.as_bytes()) {
                Error::MalformedHeader("header line not terminated".into())
            } else {
                Error::BadMagic("expected MVOL1".into())
            }
        })?;
    let line = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    let mut fields = line.split(' ');
    if fields.next() != Some(MVOL_MAGIC) {
        return Err(Error::BadMagic("expected MVOL1".into()));
    }
    let rest: Vec<&str> = fields.collect();
    if rest.len() != 6 {
        return Err(Error::MalformedHeader(format!("expected 6 header fields, found {}", rest.len())));
    }
    let mut dims = [0usize; 3];
    for (d, s) in dims.iter_mut().zip(&rest[..3]) {
        *d = s
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad dimension {s:?}")))?;
    }
    let mut spacing = [0f64; 3];
    for (d, s) in spacing.iter_mut().zip(&rest[3..]) {
        *d = s
            .parse()
            .map_err(|_| Error::MalformedHeader(format!("bad spacing {s:?}")))?;
    }
    if dims.contains(&0) {
        return Err(Error::NonPositiveDim(format!("{dims:?}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::NonPositiveDim(format!("{dims:?} overflows")))?;
    let payload = &bytes[newline + 1..];
    if payload.len() < n {
        return Err(Error::TruncatedStream { expected: n, found: payload.len() });
    }
    if payload.len() > n {
        return Err(Error::MalformedHeader(format!("{} trailing bytes", payload.len() - n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, data)
}

pub fn save_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(vol))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// Label volumes share the native format, storing class ids as floats.
pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&labels.to_volume(), path)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    LabelVolume::from_volume(&load_volume(path)?)
}
