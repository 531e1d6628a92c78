//! Repeatability maps and paired t-tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::color::rgb_to_ycbcr;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

const CV_GUARD: f64 = 1e-12;

/// Per-pixel, per-channel `sampleStd / (mean + 1e-12)` across repeats.
pub fn cv_map(repeats: &[&ImageTensor]) -> Result<ImageTensor> {
    if repeats.len() < 2 {
        return Err(Error::invalid("a CV map needs at least two repeats"));
    }
    let first = repeats[0];
    for r in &repeats[1..] {
        first.ensure_same_shape(r, "cv_map")?;
    }
    let n = repeats.len() as f64;
    let data = (0..first.len())
        .map(|i| {
            let mean = repeats.iter().map(|r| r.data()[i] as f64).sum::<f64>() / n;
            let var = repeats.iter().map(|r| (r.data()[i] as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var.sqrt() / (mean + CV_GUARD)) as f32
        })
        .collect();
    let (c, h, w) = first.shape();
    ImageTensor::new(c, h, w, data, ValueRange::UNBOUNDED)
}

/// CV map of RGB repeats after conversion to YCbCr.
pub fn ycbcr_cv_map(repeats: &[&ImageTensor]) -> Result<ImageTensor> {
    let y: Vec<ImageTensor> = repeats.iter().map(|r| rgb_to_ycbcr(r)).collect::<Result<_>>()?;
    cv_map(&y.iter().collect::<Vec<_>>())
}

/// Average of each channel of a CV map.
pub fn mean_cv(map: &ImageTensor) -> Vec<f64> {
    (0..map.channels())
        .map(|c| map.channel(c).iter().map(|&v| v as f64).sum::<f64>() / map.plane_len() as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// Two-tailed.
    TwoSided,
    /// One-tailed, `mean(x − y) > 0`.
    Greater,
    /// One-tailed, `mean(x − y) < 0`.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired t-test on `d = x − y` with `n − 1` degrees of freedom.
/// Zero spread: `t = 0, p = 1` when the mean is zero, otherwise an
/// infinite `t` with `p = 0` (or `p = 1` against the opposite side).
pub fn paired_t_test(x: &[f64], y: &[f64], alternative: Alternative) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("a paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let df = n - 1;
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 1.0, df });
        }
        let t = mean.signum() * f64::INFINITY;
        let p = match alternative {
            Alternative::TwoSided => 0.0,
            Alternative::Greater => (mean < 0.0) as u8 as f64,
            Alternative::Less => (mean > 0.0) as u8 as f64,
        };
        return Ok(TTest { t, p, df });
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: t_p_value(t, df, alternative)?,
        df,
    })
}

pub(crate) fn t_p_value(t: f64, df: usize, alternative: Alternative) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let p = match alternative {
        Alternative::Greater => dist.sf(t),
        Alternative::Less => dist.cdf(t),
        Alternative::TwoSided => 2.0 * dist.cdf(-t.abs()),
    };
    Ok(p.clamp(0.0, 1.0))
}
