//! Binary PPM (P6) codec, 8-bit samples only.

use std::path::Path;

use super::ImageRaster;
use crate::error::{Error, Result};

/// Largest accepted width·height, so a hostile header cannot force a huge allocation.
pub const MAX_PIXELS: usize = 1 << 26;

fn bad(detail: impl Into<String>) -> Error {
    Error::format("PPM", detail)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(bad(format!("missing or oversized {what}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        Ok(s.parse().expect("at most nine digits"))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRaster> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("zero dimension"));
    }
    if width.saturating_mul(height) > MAX_PIXELS {
        return Err(bad(format!("{width}×{height} exceeds pixel limit")));
    }
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported (need 255)")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(bad("no whitespace after header")),
    }
    let need = width * height * 3;
    let body = &bytes[h.pos..];
    if body.len() < need {
        return Err(bad(format!("pixel data truncated: {} of {need} bytes", body.len())));
    }
    ImageRaster::new(width, height, body[..need].to_vec())
}

pub fn encode_ppm(img: &ImageRaster) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn read_ppm(path: &Path) -> Result<ImageRaster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
        other => other,
    })
}

pub fn write_ppm(path: &Path, img: &ImageRaster) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_rejects_garbage() {
        let mut bytes = b"P6 # comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);

        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n99999 99999\n255\n").is_err());
        assert!(decode_ppm(b"P6\n0 4\n255\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(w in 1usize..12, h in 1usize..12, seed in any::<u8>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = ImageRaster::new(w, h, data).unwrap();
            let bytes = encode_ppm(&img);
            prop_assert_eq!(&decode_ppm(&bytes).unwrap(), &img);
            prop_assert_eq!(encode_ppm(&decode_ppm(&bytes).unwrap()), bytes);
        }
    }
}
