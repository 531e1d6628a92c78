//! YCbCr, CIE L*a*b* and CIE-94 color difference.

use serde::{Deserialize, Serialize};

use super::ensure_rgb;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

/// Full-range JPEG transform.
pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    ensure_rgb(img, "rgb_to_ycbcr")?;
    let n = img.plane_len();
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    let mut out = vec![0f32; 3 * n];
    for i in 0..n {
        let (r, g, b) = (r[i] as f64, g[i] as f64, b[i] as f64);
        out[i] = (0.299 * r + 0.587 * g + 0.114 * b) as f32;
        out[n + i] = (-0.168736 * r - 0.331264 * g + 0.5 * b + 0.5) as f32;
        out[2 * n + i] = (0.5 * r - 0.418688 * g - 0.081312 * b + 0.5) as f32;
    }
    ImageTensor::new(3, img.height(), img.width(), out, ValueRange::UNIT)
}

/// Equal-width bin counts on `[0, 1]`; values at 1 fall in the last bin,
/// values outside are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Y, Cb and Cr histograms pooled over all images.
pub fn ycbcr_histograms(imgs: &[&ImageTensor], bins: usize) -> Result<[Histogram; 3]> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut h: [Histogram; 3] = std::array::from_fn(|_| Histogram { counts: vec![0; bins] });
    for img in imgs {
        let y = rgb_to_ycbcr(img)?;
        for (c, hist) in h.iter_mut().enumerate() {
            for &v in y.channel(c) {
                let k = ((v.clamp(0.0, 1.0) as f64 * bins as f64) as usize).min(bins - 1);
                hist.counts[k] += 1;
            }
        }
    }
    Ok(h)
}

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

fn srgb_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// sRGB (D65) → CIE L*a*b*.
pub fn rgb_to_lab(rgb: [f64; 3]) -> Result<[f64; 3]> {
    if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("color {rgb:?} outside [0, 1]")));
    }
    let [r, g, b] = rgb.map(srgb_linear);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / WHITE[0]), lab_f(y / WHITE[1]), lab_f(z / WHITE[2]));
    Ok([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
}

/// CIE-94 ΔE (graphic-arts weights). The first argument is the reference:
/// its chroma sets the weighting functions, so the distance is not
/// symmetric.
pub fn cie94_distance(reference: [f64; 3], sample: [f64; 3]) -> Result<f64> {
    const K1: f64 = 0.045;
    const K2: f64 = 0.015;
    let [l1, a1, b1] = rgb_to_lab(reference)?;
    let [l2, a2, b2] = rgb_to_lab(sample)?;
    let (c1, c2) = (a1.hypot(b1), a2.hypot(b2));
    let dl = l1 - l2;
    let dc = c1 - c2;
    let dh2 = ((a1 - a2).powi(2) + (b1 - b2).powi(2) - dc * dc).max(0.0);
    let sc = 1.0 + K1 * c1;
    let sh = 1.0 + K2 * c1;
    Ok((dl * dl + (dc / sc).powi(2) + dh2 / (sh * sh)).sqrt())
}

fn fov_mean(img: &ImageTensor) -> [f64; 3] {
    let n = img.plane_len() as f64;
    std::array::from_fn(|c| img.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n)
}

/// CIE-94 distance between the FOV-averaged colors; `reference` is the
/// ground truth.
pub fn fov_color_distance(reference: &ImageTensor, sample: &ImageTensor) -> Result<f64> {
    ensure_rgb(reference, "fov_color_distance")?;
    ensure_rgb(sample, "fov_color_distance")?;
    if reference.is_empty() || sample.is_empty() {
        return Err(Error::invalid("fov_color_distance of an empty image"));
    }
    cie94_distance(fov_mean(reference), fov_mean(sample))
}
