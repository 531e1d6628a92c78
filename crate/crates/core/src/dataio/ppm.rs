//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Ppm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::parse(0, "missing P6 magic"));
        }
        let mut pos = 2;
        let (width, _) = header_number(bytes, &mut pos)?;
        let (height, _) = header_number(bytes, &mut pos)?;
        let (maxval, maxval_at) = header_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::parse(maxval_at, format!("unsupported maxval {maxval}")));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::parse(pos, "expected whitespace after maxval")),
        }
        let need = width * height * 3;
        let raster = &bytes[pos..];
        if raster.len() != need {
            return Err(Error::parse(
                pos,
                format!("raster has {} bytes, expected {need}", raster.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            rgb: raster.to_vec(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// From a 3-channel tensor already in [0, 255]; values are rounded half
    /// away from zero and saturated.
    pub fn from_byte_image(img: &ImageTensor) -> Result<Self> {
        if img.channels() != 3 {
            return Err(Error::invalid(format!("PPM needs 3 channels, got {}", img.channels())));
        }
        let (h, w) = (img.height(), img.width());
        let mut rgb = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgb.push(img.get(c, y, x).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            rgb,
        })
    }

    /// From a stain-domain tensor in [-1, 1].
    pub fn from_stain(img: &ImageTensor) -> Result<Self> {
        Self::from_byte_image(&stain_to_bytes(img))
    }

    pub fn to_image(&self) -> ImageTensor {
        let (w, rgb) = (self.width, &self.rgb);
        ImageTensor::from_fn(3, self.height, w, |c, y, x| rgb[(y * w + x) * 3 + c] as f32)
            .with_range(ValueRange::BYTE)
    }
}

/// `[-1, 1] → [0, 255]`, unquantized.
pub fn stain_to_bytes(img: &ImageTensor) -> ImageTensor {
    img.map(|v| (v.clamp(-1.0, 1.0) + 1.0) * 127.5)
        .with_range(ValueRange::BYTE)
}

/// `[0, 255] → [-1, 1]`.
pub fn bytes_to_stain(img: &ImageTensor) -> ImageTensor {
    img.map(|v| v / 127.5 - 1.0).with_range(ValueRange::STAIN)
}

/// Next header token as (value, offset).
fn header_number(bytes: &[u8], pos: &mut usize) -> Result<(usize, usize)> {
    // whitespace and comments before the token
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(Error::parse(*pos, "unexpected end of header")),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::parse(start, "expected a decimal number"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map(|v| (v, start))
        .map_err(|_| Error::parse(start, "number out of range"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_reports_offsets() {
        let p = Ppm::decode(b"P6 # c\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!((p.width, p.height, p.rgb.as_slice()), (1, 1, &[1u8, 2, 3][..]));
        assert!(matches!(Ppm::decode(b"P5\n1 1\n255\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(Ppm::decode(b"P6\nx 1\n255\n"), Err(Error::Parse { offset: 3, .. })));
        assert!(matches!(Ppm::decode(b"P6\n1 1\n65535\n"), Err(Error::Parse { offset: 7, .. })));
        assert!(matches!(Ppm::decode(b"P6\n1 1\n255\n\x01"), Err(Error::Parse { offset: 11, .. })));
    }

    #[test]
    fn stain_mapping_rounds_half_away() {
        let img = ImageTensor::from_fn(3, 1, 2, |c, _, x| [-1.0, 1.0, 0.0][c] * (1 - x) as f32);
        let p = Ppm::from_stain(&img).unwrap();
        // 0 maps to 127.5 which rounds to 128.
        assert_eq!(p.rgb, vec![0, 255, 128, 128, 128, 128]);
    }
}
