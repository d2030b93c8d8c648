//! Middlebury `.flo` optical-flow files.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::matching::FlowField;

pub const MAGIC: f32 = 202021.25;
/// Components with magnitude above this mark an unknown flow vector.
pub const UNKNOWN_THRESHOLD: f32 = 1e9;
const UNKNOWN_VALUE: f32 = 1e10;
/// Extents above this are rejected as corrupt.
const MAX_EXTENT: u32 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum FloError {
    #[error("bad magic {0} (expected 202021.25)")]
    BadMagic(f32),
    #[error("file too short for a header ({0} bytes)")]
    ShortHeader(usize),
    #[error("invalid extent {width}x{height}")]
    Extent { width: u32, height: u32 },
    #[error("size mismatch: header implies {expected} payload bytes, found {found}")]
    Size { expected: usize, found: usize },
}

pub fn decode(bytes: &[u8]) -> Result<FlowField, FloError> {
    if bytes.len() < 12 {
        return Err(FloError::ShortHeader(bytes.len()));
    }
    let word = |o: usize| <[u8; 4]>::try_from(&bytes[o..o + 4]).expect("4 bytes");
    let magic = f32::from_le_bytes(word(0));
    if magic != MAGIC {
        return Err(FloError::BadMagic(magic));
    }
    let width = u32::from_le_bytes(word(4));
    let height = u32::from_le_bytes(word(8));
    if width == 0 || height == 0 || width > MAX_EXTENT || height > MAX_EXTENT {
        return Err(FloError::Extent { width, height });
    }
    let n = width as usize * height as usize;
    let expected = n * 8;
    let payload = &bytes[12..];
    if payload.len() != expected {
        return Err(FloError::Size {
            expected,
            found: payload.len(),
        });
    }
    let mut field = FlowField::invalid(width as usize, height as usize);
    for (px, chunk) in payload.chunks_exact(8).enumerate() {
        let u = f32::from_le_bytes(chunk[..4].try_into().expect("4 bytes"));
        let v = f32::from_le_bytes(chunk[4..].try_into().expect("4 bytes"));
        let known = u.is_finite()
            && v.is_finite()
            && u.abs() <= UNKNOWN_THRESHOLD
            && v.abs() <= UNKNOWN_THRESHOLD;
        if known {
            field.set_index(px, [u as f64, v as f64]);
        }
    }
    Ok(field)
}

pub fn encode(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + field.len() * 8);
    out.extend(MAGIC.to_le_bytes());
    out.extend((field.width() as u32).to_le_bytes());
    out.extend((field.height() as u32).to_le_bytes());
    for px in 0..field.len() {
        let [u, v] = field
            .get_index(px)
            .map(|[u, v]| [u as f32, v as f32])
            .unwrap_or([UNKNOWN_VALUE; 2]);
        out.extend(u.to_le_bytes());
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(decode(&bytes)?)
}

pub fn write_flow(path: impl AsRef<Path>, field: &FlowField) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(field)).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> FlowField {
        let mut f = FlowField::invalid(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                f.set(x, y, [x as f64 * 0.25 - 1.0, y as f64 * 1.5]);
            }
        }
        f
    }

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let f = sample_field();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.flo");
        write_flow(&p, &f).unwrap();
        assert_eq!(read_flow(&p).unwrap(), f);
    }

    #[test]
    fn invalid_pixel_clears_mask() {
        let mut f = sample_field();
        f.invalidate(2, 1);
        let g = decode(&encode(&f)).unwrap();
        assert!(g.get(2, 1).is_none());
        assert_eq!(g.valid_count(), 14);
    }

    #[test]
    fn rejects_bad_files() {
        let mut b = encode(&sample_field());
        assert!(matches!(decode(&b[..5]), Err(FloError::ShortHeader(5))));
        let mut zero = b.clone();
        zero[..4].copy_from_slice(&0f32.to_le_bytes());
        assert_eq!(decode(&zero), Err(FloError::BadMagic(0.0)));
        b.push(0);
        assert!(matches!(decode(&b), Err(FloError::Size { .. })));
        b.truncate(b.len() - 9);
        assert!(matches!(decode(&b), Err(FloError::Size { .. })));
        let mut huge = encode(&sample_field());
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&huge), Err(FloError::Extent { .. })));
    }
}
