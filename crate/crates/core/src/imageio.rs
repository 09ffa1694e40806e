//! 16-bit grayscale PNG and binary PGM (P5).

use std::io::Cursor;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::raster::Gray16;

pub fn encode_png16(img: &Gray16) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .ok_or_else(|| Error::Internal("pixel buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Internal(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Decode a PNG. 8-bit grayscale is widened by 257 so full scale maps to full scale.
pub fn decode_png16(bytes: &[u8]) -> Result<Gray16> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png decode: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma16(b) => b.into_raw(),
        image::DynamicImage::ImageLuma8(b) => {
            b.into_raw().into_iter().map(|v| v as u16 * 257).collect()
        }
        other => {
            return Err(Error::Data(format!(
                "expected a grayscale PNG, got {:?}",
                other.color()
            )))
        }
    };
    Gray16::new(w, h, data)
}

/// Binary PGM with maxval 65535 (big-endian samples).
pub fn encode_pgm(img: &Gray16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 2);
    for v in &img.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Data(format!("pgm: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("pgm: {what} out of range")))
    }
}

/// Binary PGM, maxval 1..=65535. Samples are returned unscaled.
pub fn decode_pgm(bytes: &[u8]) -> Result<Gray16> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Data("pgm: missing P5 magic".into()));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Data(format!("pgm: empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!(
            "pgm: maxval {maxval} outside 1..=65535"
        )));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Data(
            "pgm: header must end with one whitespace byte".into(),
        ));
    }
    let body = &bytes[h.pos + 1..];
    let per = if maxval < 256 { 1 } else { 2 };
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Data("pgm: dimensions overflow".into()))?;
    let need = n
        .checked_mul(per)
        .ok_or_else(|| Error::Data("pgm: dimensions overflow".into()))?;
    if body.len() < need {
        return Err(Error::Data(format!(
            "pgm: expected {need} sample bytes, found {}",
            body.len()
        )));
    }
    let data: Vec<u16> = if per == 1 {
        body[..need].iter().map(|&v| v as u16).collect()
    } else {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(v) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Data(format!(
            "pgm: sample {v} exceeds maxval {maxval}"
        )));
    }
    Gray16::new(width, height, data)
}

pub fn read_image(path: &Path) -> Result<Gray16> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let res = match ext.as_deref() {
        Some("pgm") => decode_pgm(&bytes),
        _ => decode_png16(&bytes),
    };
    res.map_err(|e| Error::parse(path, e.to_string()))
}

/// Write as PGM when the extension is `.pgm`, PNG otherwise.
pub fn write_image(path: &Path, img: &Gray16) -> Result<()> {
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let bytes = if is_pgm {
        encode_pgm(img)
    } else {
        encode_png16(img)?
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Gray16 {
        Gray16::new(5, 3, (0..15).map(|i| (i * 4000 + 7) as u16).collect()).unwrap()
    }

    #[test]
    fn png_round_trip() {
        let img = sample();
        assert_eq!(decode_png16(&encode_png16(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let img = sample();
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        let mut b = b"P5 # made by hand\n2 1\n# max\n255\n".to_vec();
        b.extend([3, 250]);
        let g = decode_pgm(&b).unwrap();
        assert_eq!(g.data, [3, 250]);
    }

    #[test]
    fn pgm_rejects_bad_input() {
        for bad in [
            &b"P2\n1 1\n255\n\x00"[..],
            b"P5\n1 1\n0\n\x00",
            b"P5\n1 1\n70000\n\x00\x00",
            b"P5\n2 2\n65535\n\x00\x00",
            b"P5\n0 2\n255\n",
            b"P5\n99999999999999999999 1\n255\n",
            b"P5\n1 1\n100\n\xff",
        ] {
            assert!(
                decode_pgm(bad).is_err(),
                "{:?}",
                String::from_utf8_lossy(bad)
            );
        }
    }
}
