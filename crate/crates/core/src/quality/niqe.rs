//! NIQE-style no-reference score: MSCN natural-scene statistics per patch
//! at two scales (18 features each), a multivariate Gaussian over patches,
//! and a Mahalanobis-type distance between two such Gaussians.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use super::features::FeatureGaussian;
use super::grayscale;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const NIQE_DIM: usize = 36;
/// Minimum number of patch feature vectors for fitting a reference model.
pub const MIN_FIT_PATCHES: usize = 50;

/// Mean vector and covariance over patch features.
pub type MvgModel = FeatureGaussian;

const ALPHA_MIN: f64 = 0.2;
const ALPHA_STEP: f64 = 0.001;
const ALPHA_COUNT: usize = 9801;

/// `Γ(1/α)Γ(3/α)/Γ(2/α)²` on the shape grid 0.2, 0.201, ..., 10.
fn ratio_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..ALPHA_COUNT)
            .map(|i| {
                let a = ALPHA_MIN + ALPHA_STEP * i as f64;
                (ln_gamma(1.0 / a) + ln_gamma(3.0 / a) - 2.0 * ln_gamma(2.0 / a)).exp()
            })
            .collect()
    })
}

/// Grid shape whose ratio is closest to `target`.
fn match_shape(target: f64, invert: bool) -> f64 {
    let table = ratio_table();
    let mut best = (f64::INFINITY, 0usize);
    for (i, &r) in table.iter().enumerate() {
        let v = if invert { 1.0 / r } else { r };
        let d = (v - target).abs();
        if d < best.0 {
            best = (d, i);
        }
    }
    ALPHA_MIN + ALPHA_STEP * best.1 as f64
}

const TINY: f64 = 1e-20;

/// Generalized Gaussian shape and variance by moment matching.
fn fit_ggd(x: &[f64]) -> [f64; 2] {
    let n = x.len() as f64;
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    if var < TINY {
        return [ALPHA_MIN + ALPHA_STEP * (ALPHA_COUNT - 1) as f64, 0.0];
    }
    [match_shape(var / (abs * abs), false), var]
}

/// Asymmetric generalized Gaussian: shape, mean, left and right variance.
fn fit_aggd(x: &[f64]) -> [f64; 4] {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
    }
    let left = if ln > 0 { (ls / ln as f64).sqrt() } else { 0.0 };
    let right = if rn > 0 { (rs / rn as f64).sqrt() } else { 0.0 };
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    if sq < TINY {
        return [ALPHA_MIN + ALPHA_STEP * (ALPHA_COUNT - 1) as f64, 0.0, 0.0, 0.0];
    }
    let abs = x.iter().map(|v| v.abs()).sum::<f64>() / n;
    let g = left / right.max(1e-12);
    let r = abs * abs / sq;
    let big_r = r * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let alpha = match_shape(big_r, true);
    let scale = (ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp().sqrt();
    let mean = (right - left) * scale * (ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha)).exp();
    [alpha, mean, left * left, right * right]
}

/// Normalized 7×7 Gaussian, σ = 7/6.
fn window() -> [f64; 7] {
    let s = 7.0 / 6.0;
    let w: Vec<f64> = (-3..=3).map(|i: i32| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
    let total: f64 = w.iter().sum::<f64>();
    std::array::from_fn(|i| w[i] / total)
}

/// Separable smoothing with replicated edges.
fn smooth(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = window();
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = (0..7)
                .map(|i| k[i] * x[y * w + (xx as isize + i as isize - 3).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = (0..7)
                .map(|i| k[i] * tmp[(y as isize + i as isize - 3).clamp(0, h as isize - 1) as usize * w + xx])
                .sum();
        }
    }
    out
}

/// Mean-subtracted contrast-normalized coefficients.
fn mscn(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mu = smooth(x, h, w);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let mu2 = smooth(&sq, h, w);
    (0..h * w)
        .map(|i| {
            let sigma = (mu2[i] - mu[i] * mu[i]).abs().sqrt();
            (x[i] - mu[i]) / (sigma + 1.0)
        })
        .collect()
}

/// 18 statistics of one `p × p` MSCN patch with top-left `(y0, x0)`.
fn patch_stats(m: &[f64], w: usize, y0: usize, x0: usize, p: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| m[(y0 + y) * w + x0 + x];
    let vals: Vec<f64> = (0..p).flat_map(|y| (0..p).map(move |x| at(y, x))).collect();
    let mut f = fit_ggd(&vals).to_vec();
    // horizontal, vertical and the two diagonal neighbor products
    let shifts: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    for (dy, dx) in shifts {
        let mut prod = Vec::with_capacity(p * p);
        for y in 0..p {
            for x in 0..p {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= p as isize || nx >= p as isize {
                    continue;
                }
                prod.push(at(y, x) * at(ny as usize, nx as usize));
            }
        }
        f.extend(fit_aggd(&prod));
    }
    f
}

fn halve(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = 0.25
                * (x[2 * y * w + 2 * xx]
                    + x[2 * y * w + 2 * xx + 1]
                    + x[(2 * y + 1) * w + 2 * xx]
                    + x[(2 * y + 1) * w + 2 * xx + 1]);
        }
    }
    (out, oh, ow)
}

/// One 36-dim feature vector per non-overlapping `patch × patch` tile
/// (partial tiles dropped). The second scale is the 2×2 mean-pooled image
/// with half-size tiles. Intensities are scaled to `[0, 255]`.
pub fn niqe_features(img: &ImageTensor, patch: usize) -> Result<Vec<Vec<f64>>> {
    if patch < 8 || patch % 2 != 0 {
        return Err(Error::invalid(format!("NIQE patch size {patch} must be even and >= 8")));
    }
    let g = grayscale(img)?;
    let (h, w) = (g.height(), g.width());
    if h < patch || w < patch {
        return Err(Error::invalid(format!("{h}x{w} image smaller than a {patch} patch")));
    }
    let x: Vec<f64> = g.data().iter().map(|&v| 255.0 * v as f64).collect();
    let m1 = mscn(&x, h, w);
    let (x2, h2, w2) = halve(&x, h, w);
    let m2 = mscn(&x2, h2, w2);
    let mut out = Vec::new();
    for py in 0..h / patch {
        for px in 0..w / patch {
            let mut f = patch_stats(&m1, w, py * patch, px * patch, patch);
            f.extend(patch_stats(&m2, w2, py * patch / 2, px * patch / 2, patch / 2));
            out.push(f);
        }
    }
    Ok(out)
}

/// Reference model from patch feature vectors.
pub fn niqe_fit(features: &[Vec<f64>]) -> Result<MvgModel> {
    if features.len() < MIN_FIT_PATCHES {
        return Err(Error::invalid(format!(
            "NIQE fitting needs at least {MIN_FIT_PATCHES} patches, got {}",
            features.len()
        )));
    }
    if features.iter().any(|f| f.len() != NIQE_DIM) {
        return Err(Error::invalid("NIQE feature vectors must have 36 entries"));
    }
    FeatureGaussian::fit(features)
}

/// `sqrt((v1 − v2)ᵀ ((Σ1 + Σ2)/2)⁻¹ (v1 − v2))`; a pseudo-inverse replaces
/// the inverse when the pooled covariance is singular.
pub fn niqe_distance(v1: &[f64], s1: &[f64], v2: &[f64], s2: &[f64]) -> Result<f64> {
    let d = v1.len();
    if v2.len() != d || s1.len() != d * d || s2.len() != d * d {
        return Err(Error::invalid("NIQE distance operands have mismatched dimensions"));
    }
    let diff = DVector::from_iterator(d, v1.iter().zip(v2).map(|(a, b)| a - b));
    let pooled = (DMatrix::from_row_slice(d, d, s1) + DMatrix::from_row_slice(d, d, s2)) * 0.5;
    let solved = match pooled.clone().cholesky() {
        Some(c) => c.solve(&diff),
        None => {
            let eps = 1e-10 * pooled.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            pooled.pseudo_inverse(eps).map_err(|e| Error::Numerical(e.into()))? * &diff
        }
    };
    let q = diff.dot(&solved);
    if !q.is_finite() {
        return Err(Error::Numerical("NIQE distance is not finite".into()));
    }
    Ok(q.max(0.0).sqrt())
}

/// Distance between the reference model and the Gaussian of the image's
/// own patches.
pub fn niqe_score(img: &ImageTensor, model: &MvgModel, patch: usize) -> Result<f64> {
    let feats = niqe_features(img, patch)?;
    let own = if feats.len() >= 2 {
        FeatureGaussian::fit(&feats)?
    } else {
        FeatureGaussian {
            mean: feats[0].clone(),
            cov: vec![0.0; NIQE_DIM * NIQE_DIM],
            count: 1,
        }
    };
    niqe_distance(&model.mean, &model.cov, &own.mean, &own.cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec_f64;

    #[test]
    fn scalar_distance() {
        assert!((niqe_distance(&[0.0], &[1.0], &[2.0], &[1.0]).unwrap() - 2.0).abs() < 1e-12);
        // singular pooled covariance falls back to the pseudo-inverse
        let d = niqe_distance(&[0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &[3.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((d - 3.0).abs() < 1e-9);
    }

    #[test]
    fn ggd_recovers_gaussian_shape() {
        let x = normal_vec_f64(1, 0, 200_000);
        let [alpha, var] = fit_ggd(&x);
        assert!((alpha - 2.0).abs() < 0.05, "{alpha}");
        assert!((var - 1.0).abs() < 0.02);
        let laplace: Vec<f64> = x.chunks(2).map(|c| c[0] * c[1]).collect();
        assert!(fit_ggd(&laplace).first().is_some_and(|a| *a < 1.5));
    }

    #[test]
    fn aggd_of_symmetric_data_has_zero_mean() {
        let x = normal_vec_f64(2, 0, 100_000);
        let [alpha, mean, l, r] = fit_aggd(&x);
        assert!((alpha - 2.0).abs() < 0.1);
        assert!(mean.abs() < 0.02 && (l - 1.0).abs() < 0.03 && (r - 1.0).abs() < 0.03);
    }

    #[test]
    fn feature_layout() {
        let img = ImageTensor::from_fn(3, 40, 33, |c, y, x| ((c * 7 + y * 3 + x * x) % 13) as f32 / 12.0);
        let f = niqe_features(&img, 16).unwrap();
        assert_eq!(f.len(), 2 * 2);
        assert!(f.iter().all(|v| v.len() == NIQE_DIM && v.iter().all(|x| x.is_finite())));
        let flat = niqe_features(&ImageTensor::filled(1, 16, 16, 0.5), 16).unwrap();
        assert!(flat[0].iter().all(|x| x.is_finite()));
        assert!(niqe_features(&img, 7).is_err());
        assert!(niqe_fit(&f).is_err());
    }
}
