//! Radially averaged power spectrum and bilinear upsampling.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Centered 2-D power spectrum averaged over integer-radius annuli
/// `r = round(√(u² + v²))`, `r = 0..N/2`, scaled so the bins sum to 1.
/// Grayscale input, square.
pub fn radial_power_spectrum(img: &ImageTensor) -> Result<Vec<f64>> {
    if img.channels() != 1 {
        return Err(Error::invalid("spectrum needs a single-channel image"));
    }
    let n = img.height();
    if n != img.width() || n < 2 {
        return Err(Error::invalid(format!(
            "spectrum needs a square image of side >= 2, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut buf: Vec<Complex<f64>> = img.data().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::default(); n];
    for x in 0..n {
        (0..n).for_each(|y| col[y] = buf[y * n + x]);
        fft.process(&mut col);
        (0..n).for_each(|y| buf[y * n + x] = col[y]);
    }

    let bins = n / 2;
    let (mut sum, mut count) = (vec![0f64; bins], vec![0usize; bins]);
    let half = (n / 2) as isize;
    for y in 0..n {
        for x in 0..n {
            // frequency of the shifted position (y, x) relative to the center
            let v = y as isize - half;
            let u = x as isize - half;
            let r = ((u * u + v * v) as f64).sqrt().round() as usize;
            if r >= bins {
                continue;
            }
            let fy = (v.rem_euclid(n as isize)) as usize;
            let fx = (u.rem_euclid(n as isize)) as usize;
            sum[r] += buf[fy * n + fx].norm_sqr();
            count[r] += 1;
        }
    }
    let mut avg: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let total: f64 = avg.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical("image has no spectral power".into()));
    }
    avg.iter_mut().for_each(|v| *v /= total);
    Ok(avg)
}

/// Output pixel `o` samples input coordinate `(o + 0.5)/factor − 0.5`,
/// clamped to the image.
pub fn bilinear_upsample(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be >= 1"));
    }
    let (c, h, w) = img.shape();
    let (oh, ow) = (h * factor, w * factor);
    let coord = |o: usize, len: usize| {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i = (s.floor() as usize).min(len - 1);
        (i, (i + 1).min(len - 1), s - i as f64)
    };
    let rows: Vec<_> = (0..oh).map(|y| coord(y, h)).collect();
    let cols: Vec<_> = (0..ow).map(|x| coord(x, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = img.channel(ch);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let at = |y: usize, x: usize| p[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    ImageTensor::new(c, oh, ow, out, img.range)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_all_dc() {
        let s = radial_power_spectrum(&ImageTensor::filled(1, 16, 16, 0.7)).unwrap();
        assert_eq!(s.len(), 8);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|&v| v < 1e-20));
        assert!(radial_power_spectrum(&ImageTensor::filled(1, 16, 8, 0.7)).is_err());
        assert!(radial_power_spectrum(&ImageTensor::filled(1, 8, 8, 0.0)).is_err());
    }

    #[test]
    fn pure_cosine_lands_in_its_ring() {
        let n = 32;
        let img = ImageTensor::from_fn(1, n, n, |_, _, x| {
            (2.0 * std::f64::consts::PI * 5.0 * x as f64 / n as f64).cos() as f32
        });
        let s = radial_power_spectrum(&img).unwrap();
        assert!((s[5] - 1.0).abs() < 1e-9, "{s:?}");
    }

    #[test]
    fn upsample_cases() {
        let img = ImageTensor::from_fn(2, 3, 4, |c, y, x| (c * 12 + y * 4 + x) as f32);
        assert_eq!(bilinear_upsample(&img, 1).unwrap(), img);
        let row = ImageTensor::from_fn(1, 1, 2, |_, _, x| x as f32);
        // centers at 0.5/2 − 0.5 = −0.25 → clamped 0, 0.25, 0.75, 1.25 → 1
        let up = bilinear_upsample(&row, 2).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
        assert!(bilinear_upsample(&row, 0).is_err());
    }
}
