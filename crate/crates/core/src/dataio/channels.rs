//! Per-channel statistics, SNR ranking, TIC normalization and
//! standardization of ion stacks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

/// Guard added to the standard deviation in SNR and CV ratios.
pub const STD_GUARD: f64 = 1e-12;

/// `mean / (population std + 1e-12)` for every channel.
pub fn channel_snr(ions: &ImageTensor) -> Result<Vec<f64>> {
    if ions.is_empty() {
        return Err(Error::invalid("SNR of an empty tensor"));
    }
    Ok((0..ions.channels())
        .map(|c| {
            let (mean, var) = mean_var(ions.channel(c));
            mean / (var.sqrt() + STD_GUARD)
        })
        .collect())
}

fn mean_var(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedChannel {
    pub index: usize,
    pub snr: f64,
}

/// Channels ordered by SNR, plus the subset in use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelManifest {
    pub ranked: Vec<RankedChannel>,
    pub selected: Vec<usize>,
}

impl ChannelManifest {
    /// Ranks by descending SNR; ties keep ascending channel index. All
    /// channels start selected.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut ranked: Vec<RankedChannel> = scores
            .iter()
            .enumerate()
            .map(|(index, &snr)| RankedChannel { index, snr })
            .collect();
        ranked.sort_by(|a, b| b.snr.total_cmp(&a.snr).then(a.index.cmp(&b.index)));
        let selected = ranked.iter().map(|r| r.index).collect();
        Self { ranked, selected }
    }

    /// Ranks the channels of a set of stacks by their pooled SNR.
    pub fn rank(stacks: &[&ImageTensor]) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| Error::invalid("no ion stacks to rank"))?;
        let c = first.channels();
        let mut pooled: Vec<Vec<f32>> = vec![Vec::new(); c];
        for s in stacks {
            if s.channels() != c {
                return Err(Error::invalid("ion stacks disagree on channel count"));
            }
            for (ch, buf) in pooled.iter_mut().enumerate() {
                buf.extend_from_slice(s.channel(ch));
            }
        }
        let n = pooled[0].len();
        let flat: Vec<f32> = pooled.into_iter().flatten().collect();
        let joined = ImageTensor::new(c, 1, n, flat, ValueRange::UNBOUNDED)?;
        Ok(Self::from_scores(&channel_snr(&joined)?))
    }

    pub fn total(&self) -> usize {
        self.ranked.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranked.windows(2).any(|w| w[1].snr > w[0].snr) {
            return Err(Error::invalid("channel ranking is not sorted by SNR"));
        }
        if let Some(s) = self.selected.iter().find(|s| !self.ranked.iter().any(|r| r.index == **s)) {
            return Err(Error::invalid(format!("selected channel {s} is not in the ranking")));
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dataio::write_json(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = crate::dataio::read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

/// Subset size `round(total / factor)`, halves rounded away from zero.
pub fn subset_size(total: usize, factor: usize) -> Result<usize> {
    if factor == 0 {
        return Err(Error::invalid("reduction factor must be >= 1"));
    }
    let k = (total as f64 / factor as f64).round() as usize;
    if k < 1 {
        return Err(Error::invalid(format!(
            "reducing {total} channels by {factor} leaves none"
        )));
    }
    Ok(k)
}

/// Keeps the first `round(C / factor)` channels of the SNR ranking.
pub fn select_top_k(manifest: &ChannelManifest, factor: usize) -> Result<ChannelManifest> {
    let k = subset_size(manifest.total(), factor)?;
    Ok(ChannelManifest {
        ranked: manifest.ranked.clone(),
        selected: manifest.ranked[..k].iter().map(|r| r.index).collect(),
    })
}

/// Divides each pixel's spectrum by its total ion current and rescales by
/// the mean TIC; zero-TIC pixels stay zero.
pub fn tic_normalize(ions: &ImageTensor) -> Result<ImageTensor> {
    if ions.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("TIC normalization needs nonnegative intensities"));
    }
    let n = ions.plane_len();
    let mut tic = vec![0f64; n];
    for c in 0..ions.channels() {
        for (t, &v) in tic.iter_mut().zip(ions.channel(c)) {
            *t += v as f64;
        }
    }
    let mean_tic = tic.iter().sum::<f64>() / n.max(1) as f64;
    let mut out = ions.clone();
    for c in 0..ions.channels() {
        for (o, &t) in out.channel_mut(c).iter_mut().zip(&tic) {
            *o = if t > 0.0 {
                (*o as f64 / t * mean_tic) as f32
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Per-channel affine standardization fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonNormalizer {
    /// Source channel indices, in model input order.
    pub channels: Vec<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl IonNormalizer {
    pub fn fit(stacks: &[&ImageTensor], channels: &[usize]) -> Result<Self> {
        if stacks.is_empty() || channels.is_empty() {
            return Err(Error::invalid("normalizer needs stacks and channels"));
        }
        let mut mean = Vec::with_capacity(channels.len());
        let mut std = Vec::with_capacity(channels.len());
        for &c in channels {
            let mut vals = Vec::new();
            for s in stacks {
                if c >= s.channels() {
                    return Err(Error::invalid(format!("channel {c} out of range")));
                }
                vals.extend_from_slice(s.channel(c));
            }
            let (m, v) = mean_var(&vals);
            mean.push(m as f32);
            std.push(v.sqrt().max(1e-6) as f32);
        }
        Ok(Self {
            channels: channels.to_vec(),
            mean,
            std,
        })
    }

    pub fn apply(&self, ions: &ImageTensor) -> Result<ImageTensor> {
        let mut out = ions.select_channels(&self.channels)?;
        for (i, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.channel_mut(i).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out.with_range(ValueRange::UNBOUNDED))
    }
}
