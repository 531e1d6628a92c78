//! Deep-feature metrics: perceptual distance and FID.
//!
//! The default extractor is a seeded random convolution stack standing in
//! for a pretrained backbone, so both scores are proxies: comparable within
//! one extractor identity, not with published values.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ensure_rgb;
use crate::error::{Error, Result};
use crate::rng::{normal_vec_f64, Seed};
use crate::tensor::{ImageTensor, ValueRange};

/// Per-layer feature maps `C_l × H_l × W_l` plus the identity of the
/// extractor that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub extractor: String,
    pub layers: Vec<ImageTensor>,
}

impl FeatureStack {
    /// Channel means of every layer, concatenated.
    pub fn pooled(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                (0..l.channels()).map(|c| l.channel(c).iter().map(|&v| v as f64).sum::<f64>() / l.plane_len() as f64)
            })
            .collect()
    }
}

pub trait FeatureExtractor {
    /// Stable identity, recorded with every score.
    fn identity(&self) -> String;
    fn extract(&self, rgb: &ImageTensor) -> Result<FeatureStack>;
}

struct ConvLayer {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
}

/// Three 3×3 stride-2 convolutions with ReLU, widths 16/32/64, He-normal
/// weights from a fixed seed and zero biases. Input RGB in `[0, 1]` is
/// mapped to `[-1, 1]` first.
pub struct RandomConvExtractor {
    seed: Seed,
    layers: Vec<ConvLayer>,
}

impl RandomConvExtractor {
    pub const DEFAULT_SEED: Seed = 0x1f5e_a7e5;
    pub const WIDTHS: [usize; 3] = [16, 32, 64];

    pub fn new(seed: Seed) -> Self {
        let mut cin = 3;
        let layers = Self::WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let weight = normal_vec_f64(seed, i as u64, cout * cin * 9)
                    .into_iter()
                    .map(|z| std * z)
                    .collect();
                let l = ConvLayer { cin, cout, weight };
                cin = cout;
                l
            })
            .collect();
        Self { seed, layers }
    }

    /// Feature vector length used for FID.
    pub fn pooled_dim(&self) -> usize {
        Self::WIDTHS.iter().sum()
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

/// Zero-padded 3×3 convolution with stride 2, then ReLU.
fn conv_s2_relu(x: &[f64], h: usize, w: usize, l: &ConvLayer) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0f64; l.cout * oh * ow];
    for o in 0..l.cout {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..l.cin {
            let k = &l.weight[(o * l.cin + i) * 9..(o * l.cin + i + 1) * 9];
            let src = &x[i * h * w..(i + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        let sy = (2 * y + ky) as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = (2 * xx + kx) as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            s += k[ky * 3 + kx] * src[sy as usize * w + sx as usize];
                        }
                    }
                    plane[y * ow + xx] += s;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    (out, oh, ow)
}

impl FeatureExtractor for RandomConvExtractor {
    fn identity(&self) -> String {
        format!("random-conv-16-32-64/seed={:#x}", self.seed)
    }

    fn extract(&self, rgb: &ImageTensor) -> Result<FeatureStack> {
        ensure_rgb(rgb, "feature extraction")?;
        let (mut h, mut w) = (rgb.height(), rgb.width());
        let mut x: Vec<f64> = rgb.data().iter().map(|&v| 2.0 * v as f64 - 1.0).collect();
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (y, oh, ow) = conv_s2_relu(&x, h, w, l);
            layers.push(ImageTensor::new(
                l.cout,
                oh,
                ow,
                y.iter().map(|&v| v as f32).collect(),
                ValueRange::UNBOUNDED,
            )?);
            (x, h, w) = (y, oh, ow);
        }
        Ok(FeatureStack {
            extractor: self.identity(),
            layers,
        })
    }
}

/// `Σ_l 1/(H_l W_l) Σ_{h,w} ‖m̂ˡ_hw − m̂ˡ_0hw‖²` over the extractor's layers,
/// without per-channel learned weights.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, extractor: &impl FeatureExtractor) -> Result<f64> {
    a.ensure_same_shape(b, "perceptual_distance")?;
    stack_distance(&extractor.extract(a)?, &extractor.extract(b)?)
}

pub(crate) fn stack_distance(fa: &FeatureStack, fb: &FeatureStack) -> Result<f64> {
    if fa.extractor != fb.extractor || fa.layers.len() != fb.layers.len() {
        return Err(Error::invalid(format!(
            "feature stacks from different extractors ({} vs {})",
            fa.extractor, fb.extractor
        )));
    }
    let mut d = 0.0;
    for (la, lb) in fa.layers.iter().zip(&fb.layers) {
        la.ensure_same_shape(lb, "perceptual_distance")?;
        let s: f64 = la
            .data()
            .iter()
            .zip(lb.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum();
        d += s / la.plane_len() as f64;
    }
    Ok(d)
}

/// Sample mean and covariance of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, normalized by `n − 1`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureGaussian {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::invalid("a feature Gaussian needs at least two samples"));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::invalid("feature vectors must share a nonzero dimension"));
        }
        let mean: Vec<f64> = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0f64; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

/// Eigenvalues below this (relative to the largest magnitude) are an error.
const PSD_TOL: f64 = 1e-8;

fn clamp_eigen(values: &DVector<f64>, what: &str) -> Result<Vec<f64>> {
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            if v < -PSD_TOL * scale {
                Err(Error::Numerical(format!("{what} has eigenvalue {v:e}")))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

fn sqrt_psd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m);
    let lam = clamp_eigen(&e.eigenvalues, what)?;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(lam.len(), lam.iter().map(|v| v.sqrt())));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μ − μ_ω‖² + tr(Σ + Σ_ω − 2(ΣΣ_ω)^{1/2})`, with the trace of the root
/// taken from the eigenvalues of `Σ^{1/2} Σ_ω Σ^{1/2}`.
pub fn fid(real: &FeatureGaussian, generated: &FeatureGaussian) -> Result<f64> {
    if real.dim() != generated.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            real.dim(),
            generated.dim()
        )));
    }
    let mean_term: f64 = real.mean.iter().zip(&generated.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let (s1, s2) = (real.cov_matrix(), generated.cov_matrix());
    let root = sqrt_psd(s1.clone(), "real covariance")?;
    let mut inner = &root * &s2 * &root;
    inner = (&inner + inner.transpose()) * 0.5;
    let lam = clamp_eigen(&SymmetricEigen::new(inner).eigenvalues, "covariance product")?;
    let cross: f64 = lam.iter().map(|v| v.sqrt()).sum();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(mean: f64, var: f64) -> FeatureGaussian {
        FeatureGaussian {
            mean: vec![mean],
            cov: vec![var],
            count: 10,
        }
    }

    #[test]
    fn fid_scalar_cases() {
        assert!((fid(&gaussian(0.0, 1.0), &gaussian(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((fid(&gaussian(0.0, 1.0), &gaussian(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!(fid(&gaussian(0.0, 1.0), &FeatureGaussian { mean: vec![0.0; 2], cov: vec![0.0; 4], count: 2 }).is_err());
        assert!(fid(&gaussian(0.0, -1.0), &gaussian(0.0, 1.0)).is_err());
    }

    #[test]
    fn fit_matches_hand_moments() {
        let g = FeatureGaussian::fit(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(g.mean, vec![2.0, 2.0]);
        assert_eq!(g.cov, vec![1.0, 1.0, 1.0, 4.0]);
        assert!(FeatureGaussian::fit(&[vec![1.0]]).is_err());
    }

    #[test]
    fn extractor_shapes() {
        let e = RandomConvExtractor::default();
        let img = ImageTensor::from_fn(3, 9, 8, |c, y, x| ((c + y + x) % 5) as f32 / 4.0);
        let s = e.extract(&img).unwrap();
        let shapes: Vec<_> = s.layers.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![(16, 5, 4), (32, 3, 2), (64, 2, 1)]);
        assert_eq!(s.pooled().len(), e.pooled_dim());
        let other = RandomConvExtractor::new(1).extract(&img).unwrap();
        assert!(stack_distance(&s, &other).is_err());
    }
}
