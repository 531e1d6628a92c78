//! Image quality metrics. RGB inputs are expected in `[0, 1]`; use
//! [`stain_to_unit`] on network outputs first.

mod color;
mod features;
mod niqe;
mod report;
mod spectrum;
mod stats;

pub use color::{cie94_distance, fov_color_distance, rgb_to_lab, rgb_to_ycbcr, ycbcr_histograms, Histogram};
pub use features::{
    fid, perceptual_distance, FeatureExtractor, FeatureGaussian, FeatureStack, RandomConvExtractor,
};
pub use niqe::{niqe_distance, niqe_features, niqe_fit, niqe_score, MvgModel, MIN_FIT_PATCHES, NIQE_DIM};
pub use report::{evaluate_pair, MetricReport, PairMetrics, TestRow};
pub use spectrum::{bilinear_upsample, radial_power_spectrum};
pub use stats::{cv_map, mean_cv, paired_t_test, ycbcr_cv_map, Alternative, TTest};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;
/// Luma weights used for every grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// `[-1, 1] → [0, 1]`.
pub fn stain_to_unit(img: &ImageTensor) -> ImageTensor {
    img.map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5).clamp(0.0, 1.0))
        .with_range(ValueRange::UNIT)
}

pub(crate) fn ensure_rgb(img: &ImageTensor, what: &str) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!("{what} needs 3 channels, got {}", img.channels())));
    }
    Ok(())
}

/// Luma of an RGB image; single-channel input passes through.
pub fn grayscale(img: &ImageTensor) -> Result<ImageTensor> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
            let data = (0..img.plane_len())
                .map(|i| (LUMA[0] * r[i] as f64 + LUMA[1] * g[i] as f64 + LUMA[2] * b[i] as f64) as f32)
                .collect();
            ImageTensor::new(1, img.height(), img.width(), data, img.range)
        }
        c => Err(Error::invalid(format!("grayscale needs 1 or 3 channels, got {c}"))),
    }
}

/// Percentile `p ∈ [0, 100]` with linear interpolation between order
/// statistics (rank `p/100 · (n − 1)`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = rank - lo as f64;
    Ok(v[lo] + frac * (v[hi] - v[lo]))
}

/// `(A90 − A10)/(A90 + A10)` of the grayscale image; 0 when the
/// denominator vanishes.
pub fn contrast(img: &ImageTensor) -> Result<f64> {
    let g = grayscale(img)?;
    let v: Vec<f64> = g.data().iter().map(|&x| x as f64).collect();
    let (a90, a10) = (percentile(&v, 90.0)?, percentile(&v, 10.0)?);
    if a90 + a10 == 0.0 {
        return Ok(0.0);
    }
    Ok((a90 - a10) / (a90 + a10))
}

pub fn mse(gt: &ImageTensor, pred: &ImageTensor) -> Result<f64> {
    gt.ensure_same_shape(pred, "mse")?;
    if gt.is_empty() {
        return Err(Error::invalid("mse of empty images"));
    }
    let s: f64 = gt
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / gt.len() as f64)
}

/// `10 log10(max(gt)² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(gt: &ImageTensor, pred: &ImageTensor) -> Result<f64> {
    let e = mse(gt, pred)?;
    if e < 1e-12 {
        return Ok(PSNR_CAP);
    }
    let peak = gt.data().iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrast_cases() {
        assert_eq!(contrast(&ImageTensor::filled(1, 4, 4, 0.3)).unwrap(), 0.0);
        assert_eq!(contrast(&ImageTensor::filled(1, 4, 4, 0.0)).unwrap(), 0.0);
        let half = ImageTensor::from_fn(1, 10, 10, |_, y, _| if y < 5 { 0.0 } else { 1.0 });
        assert_eq!(contrast(&half).unwrap(), 1.0);
        let ramp = ImageTensor::from_fn(1, 1, 101, |_, _, x| x as f32 / 100.0);
        // order statistics 90 and 10 of 0, 0.01, ..., 1
        let want = (0.9 - 0.1) / (0.9 + 0.1);
        assert!((contrast(&ramp).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 2.5);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn psnr_cases() {
        let one = ImageTensor::filled(3, 2, 2, 1.0);
        let zero = ImageTensor::filled(3, 2, 2, 0.0);
        assert_eq!(psnr(&one, &one).unwrap(), PSNR_CAP);
        assert_eq!(mse(&one, &zero).unwrap(), 1.0);
        assert_eq!(psnr(&one, &zero).unwrap(), 0.0);
        let gt = ImageTensor::from_fn(1, 1, 2, |_, _, x| if x == 0 { 255.0 } else { 0.0 });
        let pred = ImageTensor::from_fn(1, 1, 2, |_, _, x| if x == 0 { 0.0 } else { 255.0 });
        assert_eq!(psnr(&gt, &pred).unwrap(), 0.0);
        assert!(psnr(&one, &ImageTensor::filled(3, 2, 1, 1.0)).is_err());
    }

    #[test]
    fn grayscale_weights() {
        let img = ImageTensor::from_fn(3, 1, 1, |c, _, _| [1.0, 0.0, 0.0][c]);
        assert!((grayscale(&img).unwrap().data()[0] - 0.299).abs() < 1e-7);
        assert!(grayscale(&ImageTensor::filled(2, 1, 1, 0.0)).is_err());
    }
}
