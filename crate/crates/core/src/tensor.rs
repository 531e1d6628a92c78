//! Dense C×H×W image tensors.

use crate::error::{Error, Result};

/// Nominal value interval a tensor's data is expected to live in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl ValueRange {
    pub const STAIN: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    pub const BYTE: ValueRange = ValueRange { lo: 0.0, hi: 255.0 };
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    pub const UNBOUNDED: ValueRange = ValueRange {
        lo: f32::NEG_INFINITY,
        hi: f32::INFINITY,
    };
}

/// Row-major C×H×W array of `f32` with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub range: ValueRange,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at element {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, range: ValueRange) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            range,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
            range: ValueRange::UNBOUNDED,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
            range: ValueRange::UNBOUNDED,
        }
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Copies the listed channels, in order, into a new tensor.
    pub fn select_channels(&self, indices: &[usize]) -> Result<ImageTensor> {
        let n = self.plane_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &c in indices {
            if c >= self.channels {
                return Err(Error::invalid(format!(
                    "channel {c} out of range for {} channels",
                    self.channels
                )));
            }
            data.extend_from_slice(self.channel(c));
        }
        Ok(ImageTensor {
            channels: indices.len(),
            height: self.height,
            width: self.width,
            data,
            range: self.range,
        })
    }

    /// Spatial sub-window `[y0, y0+h) × [x0, x0+w)` across all channels.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageTensor> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::invalid(format!(
                "crop window ({y0},{x0})+({h},{w}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(ImageTensor {
            channels: self.channels,
            height: h,
            width: w,
            data,
            range: self.range,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
