//! Reverse bridge sampling: vanilla, mean, skip and averaged strategies.
//!
//! Every noise draw of a run with seed `s` at source time `t` comes from
//! stream `(s, t)`, element by element, so strategies that suppress noise
//! consume a strict subset of the draws vanilla sampling would use.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{self, Ppm};
use crate::error::{Error, Result};
use crate::model::{predict_x0, StainModel};
use crate::nn::Parameters;
use crate::rng::{derive_seed, fill_normal, Seed};
use crate::schedule::{BridgeSchedule, StepPlan};
use crate::tensor::{ImageTensor, ValueRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Mean,
    Skip,
    Average,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Mean => "mean",
            Strategy::Skip => "skip",
            Strategy::Average => "average",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Strategy::Vanilla),
            "mean" => Ok(Strategy::Mean),
            "skip" => Ok(Strategy::Skip),
            "average" => Ok(Strategy::Average),
            _ => Err(Error::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    /// Exit point on the diffusion-time axis, 0..=T.
    pub exit_time: usize,
    /// Number of inference strides.
    pub steps: usize,
    /// Runs averaged by the `average` strategy.
    pub runs: usize,
    /// Strategy of each averaged run.
    pub inner: Strategy,
    pub seed: Seed,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Vanilla,
            exit_time: 0,
            steps: 200,
            runs: 5,
            inner: Strategy::Vanilla,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, sched: &BridgeSchedule) -> Result<()> {
        if self.exit_time > sched.steps() {
            return Err(Error::invalid(format!(
                "exit time {} beyond T = {}",
                self.exit_time,
                sched.steps()
            )));
        }
        if self.strategy == Strategy::Average {
            if self.runs == 0 {
                return Err(Error::invalid("averaging needs at least one run"));
            }
            if self.inner == Strategy::Average {
                return Err(Error::invalid("averaged runs cannot themselves average"));
            }
        }
        StepPlan::new(sched.steps(), self.steps).map(|_| ())
    }
}

/// Anything that predicts `D ≈ x_t − x0`.
pub trait Denoiser {
    fn denoise(&self, x_t: &ImageTensor, x_end: &ImageTensor, t: usize, steps: usize) -> Result<ImageTensor>;
}

/// A trained (or freshly initialized) network.
#[derive(Debug, Clone, Copy)]
pub struct Network<'a> {
    pub model: &'a StainModel,
    pub params: &'a Parameters,
}

impl Denoiser for Network<'_> {
    fn denoise(&self, x_t: &ImageTensor, x_end: &ImageTensor, t: usize, steps: usize) -> Result<ImageTensor> {
        self.model.denoiser_forward(self.params, x_t, x_end, t, steps)
    }
}

/// Posterior step given an `x0` estimate. With `noise_seed`, adds
/// `sqrt(var)·ε` from stream `(seed, t)`; returns the number of draws used.
/// When the posterior is a point mass on `x̂0`, returns `x̂0` itself.
pub fn posterior_step(
    sched: &BridgeSchedule,
    x_t: &ImageTensor,
    x0_hat: &ImageTensor,
    x_end: &ImageTensor,
    t: usize,
    t_prev: usize,
    noise_seed: Option<Seed>,
) -> Result<(ImageTensor, usize)> {
    x_t.ensure_same_shape(x0_hat, "posterior_step")?;
    x_t.ensure_same_shape(x_end, "posterior_step")?;
    let p = sched.posterior(t, t_prev)?;
    if p.is_point_mass_on_x0() {
        return Ok((x0_hat.clone(), 0));
    }
    let mut eps = vec![0f32; x_t.len()];
    let draws = match noise_seed {
        Some(seed) if p.var > 0.0 => {
            fill_normal(seed, t as u64, &mut eps);
            eps.len()
        }
        _ => 0,
    };
    let sd = p.var.sqrt();
    let data = x_t
        .data()
        .iter()
        .zip(x0_hat.data())
        .zip(x_end.data())
        .zip(&eps)
        .map(|(((&a, &b), &c), &e)| {
            let mut v = p.coef_x * a as f64 + p.coef_x0 * b as f64 + p.coef_xt * c as f64;
            if draws > 0 {
                v += sd * e as f64;
            }
            v as f32
        })
        .collect();
    let out = ImageTensor::new(x_t.channels(), x_t.height(), x_t.width(), data, ValueRange::UNBOUNDED)
        .map_err(|_| Error::Numerical(format!("non-finite state at t = {t_prev}")))?;
    Ok((out, draws))
}

/// Output of one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_prev: ImageTensor,
    pub x0_hat: ImageTensor,
    pub draws: usize,
}

/// `D = denoise(x_t, x_T, t)`, `x̂0 = clamp(x_t − D)`, then the posterior
/// step to `t_prev`.
pub fn reverse_step(
    den: &impl Denoiser,
    sched: &BridgeSchedule,
    x_t: &ImageTensor,
    x_end: &ImageTensor,
    t: usize,
    t_prev: usize,
    noise_seed: Option<Seed>,
) -> Result<StepOutput> {
    let d = den.denoise(x_t, x_end, t, sched.steps())?;
    let x0_hat = predict_x0(x_t, &d)?;
    let (x_prev, draws) = posterior_step(sched, x_t, &x0_hat, x_end, t, t_prev, noise_seed)?;
    Ok(StepOutput { x_prev, x0_hat, draws })
}

/// A finished sample with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// 3×H×W in [-1, 1].
    pub image: ImageTensor,
    pub draws: usize,
    pub denoiser_calls: usize,
}

/// Runs the configured strategy from the endpoint `x_end`.
pub fn sample_from_endpoint(
    den: &impl Denoiser,
    sched: &BridgeSchedule,
    x_end: &ImageTensor,
    cfg: &SamplingConfig,
) -> Result<SampleOutput> {
    cfg.validate(sched)?;
    if cfg.strategy == Strategy::Average {
        let mut acc = vec![0f64; x_end.len()];
        let (mut draws, mut calls) = (0, 0);
        for k in 0..cfg.runs {
            let run = SamplingConfig {
                strategy: cfg.inner,
                seed: derive_seed(cfg.seed, k as u64),
                ..cfg.clone()
            };
            let out = single_run(den, sched, x_end, &run)?;
            acc.iter_mut().zip(out.image.data()).for_each(|(a, &v)| *a += v as f64);
            draws += out.draws;
            calls += out.denoiser_calls;
        }
        let n = cfg.runs as f64;
        let data = acc.into_iter().map(|v| (v / n) as f32).collect();
        let (c, h, w) = x_end.shape();
        return Ok(SampleOutput {
            image: ImageTensor::new(c, h, w, data, ValueRange::STAIN)?,
            draws,
            denoiser_calls: calls,
        });
    }
    single_run(den, sched, x_end, cfg)
}

fn single_run(
    den: &impl Denoiser,
    sched: &BridgeSchedule,
    x_end: &ImageTensor,
    cfg: &SamplingConfig,
) -> Result<SampleOutput> {
    let plan = StepPlan::new(sched.steps(), cfg.steps)?;
    let mut x = x_end.clone();
    let (mut draws, mut calls) = (0, 0);
    for (t, t_prev) in plan.pairs() {
        let exits = cfg.strategy == Strategy::Skip && (t <= cfg.exit_time || t_prev == 0);
        let noise = match cfg.strategy {
            Strategy::Vanilla => t_prev > 0,
            Strategy::Skip => t_prev > 0 && !exits,
            Strategy::Mean => t_prev > cfg.exit_time,
            Strategy::Average => unreachable!("averaging is resolved by the caller"),
        };
        let step = reverse_step(den, sched, &x, x_end, t, t_prev, noise.then_some(cfg.seed))?;
        calls += 1;
        draws += step.draws;
        if exits {
            return Ok(SampleOutput {
                image: step.x0_hat,
                draws,
                denoiser_calls: calls,
            });
        }
        x = step.x_prev;
    }
    Ok(SampleOutput {
        image: x.with_range(ValueRange::STAIN),
        draws,
        denoiser_calls: calls,
    })
}

/// Conditioner, then the reverse process. `ions` must already be
/// standardized and channel-selected.
pub fn sample(
    model: &StainModel,
    params: &Parameters,
    sched: &BridgeSchedule,
    ions: &ImageTensor,
    cfg: &SamplingConfig,
) -> Result<SampleOutput> {
    let x_end = model.conditioner_forward(params, ions)?;
    sample_from_endpoint(&Network { model, params }, sched, &x_end, cfg)
}

/// Seed of repeat `run` under base seed `base`.
pub fn run_seed(base: Seed, run: usize) -> Seed {
    derive_seed(base, 0x7275_6e00 + run as u64)
}

/// `runs` samples from one endpoint, in run order.
pub fn repeat_from_endpoint(
    den: &impl Denoiser,
    sched: &BridgeSchedule,
    x_end: &ImageTensor,
    cfg: &SamplingConfig,
    runs: usize,
) -> Result<Vec<SampleOutput>> {
    if runs < 2 {
        return Err(Error::invalid("repeat sampling needs at least two runs"));
    }
    (0..runs)
        .map(|r| {
            let run = SamplingConfig {
                seed: run_seed(cfg.seed, r),
                ..cfg.clone()
            };
            sample_from_endpoint(den, sched, x_end, &run)
        })
        .collect()
}

pub fn repeat_sample(
    model: &StainModel,
    params: &Parameters,
    sched: &BridgeSchedule,
    ions: &ImageTensor,
    cfg: &SamplingConfig,
    runs: usize,
) -> Result<Vec<SampleOutput>> {
    let x_end = model.conditioner_forward(params, ions)?;
    repeat_from_endpoint(&Network { model, params }, sched, &x_end, cfg, runs)
}

/// Writes `<name>.ppm` (quantized) and `<name>.vstn` (raw) under `dir`.
pub fn save_stain(dir: impl AsRef<Path>, name: &str, img: &ImageTensor) -> Result<()> {
    let dir = dir.as_ref();
    dataio::ensure_dir(dir)?;
    Ppm::from_stain(img)?.write(dir.join(format!("{name}.ppm")))?;
    dataio::write_image(dir.join(format!("{name}.vstn")), img)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Knows the answer: `D = x_t − x0`.
    struct Oracle(ImageTensor);

    impl Denoiser for Oracle {
        fn denoise(&self, x_t: &ImageTensor, _: &ImageTensor, _: usize, _: usize) -> Result<ImageTensor> {
            let data = x_t.data().iter().zip(self.0.data()).map(|(a, b)| a - b).collect();
            ImageTensor::new(x_t.channels(), x_t.height(), x_t.width(), data, ValueRange::UNBOUNDED)
        }
    }

    fn setup() -> (Oracle, BridgeSchedule, ImageTensor) {
        let x0 = ImageTensor::from_fn(3, 2, 2, |c, y, x| 0.2 * c as f32 - 0.1 * (y + x) as f32);
        (Oracle(x0), BridgeSchedule::new(20, 1.0).unwrap(), ImageTensor::filled(3, 2, 2, 0.5))
    }

    #[test]
    fn final_step_returns_the_estimate() {
        let (o, sched, end) = setup();
        let s = reverse_step(&o, &sched, &end, &end, 1, 0, Some(3)).unwrap();
        assert_eq!(s.x_prev, s.x0_hat);
        assert_eq!(s.draws, 0);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Vanilla, Strategy::Mean, Strategy::Skip, Strategy::Average] {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("ddim".parse::<Strategy>().is_err());
    }

    #[test]
    fn invalid_configs() {
        let (o, sched, end) = setup();
        let bad = [
            SamplingConfig { exit_time: 21, steps: 5, ..Default::default() },
            SamplingConfig { strategy: Strategy::Average, inner: Strategy::Average, steps: 5, ..Default::default() },
            SamplingConfig { strategy: Strategy::Average, runs: 0, steps: 5, ..Default::default() },
            SamplingConfig { steps: 22, ..Default::default() },
        ];
        for cfg in bad {
            assert!(sample_from_endpoint(&o, &sched, &end, &cfg).is_err(), "{cfg:?}");
        }
    }
}
