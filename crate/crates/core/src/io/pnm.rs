//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use thiserror::Error;

use super::ImageBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("not a binary PGM/PPM file (magic {0:?})")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("degenerate image extent {width}x{height}")]
    Extent { width: usize, height: usize },
    #[error("unsupported maxval {0} (only 255)")]
    Maxval(usize),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} bytes of trailing data after payload")]
    Trailing(usize),
}

/// Header fields are limited to this many digits to rule out overflow.
const MAX_DIGITS: usize = 9;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<usize, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        let digits = &self.bytes[start..self.pos];
        if digits.is_empty() || digits.len() > MAX_DIGITS {
            return Err(PnmError::Header(what));
        }
        Ok(std::str::from_utf8(digits)
            .expect("ascii digits")
            .parse()
            .expect("bounded digit count"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer, PnmError> {
    if bytes.len() < 2 {
        return Err(PnmError::BadMagic(String::from_utf8_lossy(bytes).into_owned()));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(PnmError::BadMagic(String::from_utf8_lossy(m).into_owned())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(PnmError::Header("missing separator after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::Extent { width, height });
    }
    if maxval != 255 {
        return Err(PnmError::Maxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match cur.bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PnmError::Header("missing separator before payload")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(PnmError::Extent { width, height })?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(PnmError::Trailing(payload.len() - expected));
    }
    Ok(ImageBuffer::new(width, height, channels, payload.to_vec()).expect("validated extent"))
}

pub fn encode(image: &ImageBuffer) -> Vec<u8> {
    let magic = if image.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.data());
    out
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(decode(&bytes)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(image)).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random()).collect();
        ImageBuffer::new(w, h, c, data).unwrap()
    }

    #[test]
    fn pgm_roundtrip() {
        let img = random_image(16, 16, 1, 1);
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn ppm_roundtrip_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = random_image(7, 5, 3, 2);
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
    }

    #[test]
    fn comments_are_allowed() {
        let mut b = b"P5 # made by hand\n2 # width\n1\n255\n".to_vec();
        b.extend([1, 2]);
        let img = decode(&b).unwrap();
        assert_eq!(img.data(), &[1, 2]);
    }

    #[test]
    fn degenerate_and_bad_headers() {
        assert_eq!(decode(b"P5 0 0 255\n"), Err(PnmError::Extent { width: 0, height: 0 }));
        assert!(matches!(decode(b"P3 1 1 255\n0"), Err(PnmError::BadMagic(_))));
        assert_eq!(decode(b"P5 1 1 65535\n\0\0"), Err(PnmError::Maxval(65535)));
        assert!(matches!(decode(b"P5 1 x 255\n\0"), Err(PnmError::Header(_))));
        assert!(matches!(decode(b"P5 99999999999 1 255\n"), Err(PnmError::Header(_))));
        assert_eq!(
            decode(b"P5 2 2 255\n\0\0"),
            Err(PnmError::Truncated { expected: 4, found: 2 })
        );
        assert_eq!(decode(b"P5 1 1 255\n\0\0"), Err(PnmError::Trailing(1)));
        assert!(decode(b"").is_err());
        assert!(decode(b"P5").is_err());
    }

    #[test]
    fn missing_file_is_a_read_error() {
        assert!(matches!(read_image("/nonexistent/x.pgm"), Err(Error::Read { .. })));
    }
}
