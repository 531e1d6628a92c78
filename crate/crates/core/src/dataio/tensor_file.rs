//! `VSTN` binary tensor files.
//!
//! Layout: magic `VSTN`, version byte (1), dtype byte (1 = f32, 2 = u8,
//! 3 = u16), ndim byte, `ndim` little-endian u32 dims, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

const MAGIC: &[u8; 4] = b"VSTN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
            TensorData::U16(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<u32>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<u32>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::invalid("too many dimensions"));
        }
        let n = shape.iter().map(|&d| d as usize).product::<usize>();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_image(img: &ImageTensor) -> Self {
        let (c, h, w) = img.shape();
        Self {
            shape: vec![c as u32, h as u32, w as u32],
            data: TensorData::F32(img.data().to_vec()),
        }
    }

    pub fn from_labels(labels: &[u8], h: usize, w: usize) -> Result<Self> {
        Self::new(vec![h as u32, w as u32], TensorData::U8(labels.to_vec()))
    }

    /// Interprets a 3-D tensor as an image (integer payloads are widened).
    pub fn to_image(&self, range: ValueRange) -> Result<ImageTensor> {
        let [c, h, w] = self.shape[..] else {
            return Err(Error::invalid(format!(
                "expected a 3-D tensor, found shape {:?}",
                self.shape
            )));
        };
        let data = match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            TensorData::U16(v) => v.iter().map(|&x| x as f32).collect(),
        };
        ImageTensor::new(c as usize, h as usize, w as usize, data, range)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.code());
        out.push(self.shape.len() as u8);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 {
            return Err(Error::parse(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::parse(0, "bad magic, expected VSTN"));
        }
        if bytes[4] != VERSION {
            return Err(Error::parse(4, format!("unsupported version {}", bytes[4])));
        }
        let code = bytes[5];
        let width = match code {
            1 => 4,
            2 => 1,
            3 => 2,
            _ => return Err(Error::parse(5, format!("unknown dtype code {code}"))),
        };
        let ndim = bytes[6] as usize;
        let mut pos = 7;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let Some(chunk) = bytes.get(pos..pos + 4) else {
                return Err(Error::parse(bytes.len(), "truncated shape"));
            };
            shape.push(u32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            pos += 4;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::parse(7, "shape overflows"))?;
        let expect = n
            .checked_mul(width)
            .ok_or_else(|| Error::parse(7, "payload size overflows"))?;
        let payload = &bytes[pos..];
        if payload.len() != expect {
            return Err(Error::parse(
                pos,
                format!("payload has {} bytes, shape needs {expect}", payload.len()),
            ));
        }
        let data = match code {
            1 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            2 => TensorData::U8(payload.to_vec()),
            _ => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                    .collect(),
            ),
        };
        Ok(Self { shape, data })
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
}

pub fn write_image(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    TensorFile::from_image(img).write(path)
}

pub fn read_image(path: impl AsRef<Path>, range: ValueRange) -> Result<ImageTensor> {
    TensorFile::read(path)?.to_image(range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = TensorFile::new(vec![1, 2], TensorData::U16(vec![1, 258])).unwrap();
        let b = f.encode();
        assert_eq!(&b[..7], b"VSTN\x01\x03\x02");
        assert_eq!(&b[7..15], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[15..], &[1, 0, 2, 1]);
        assert_eq!(TensorFile::decode(&b).unwrap(), f);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(TensorFile::decode(b"VSTX\x01\x01\x00"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(TensorFile::decode(b"VSTN\x02\x01\x00"), Err(Error::Parse { offset: 4, .. })));
        assert!(matches!(TensorFile::decode(b"VSTN\x01\x09\x00"), Err(Error::Parse { offset: 5, .. })));
        let mut b = TensorFile::new(vec![2], TensorData::F32(vec![1.0, 2.0])).unwrap().encode();
        b.pop();
        assert!(matches!(TensorFile::decode(&b), Err(Error::Parse { offset: 11, .. })));
        assert!(TensorFile::new(vec![3], TensorData::U8(vec![1])).is_err());
    }
}
