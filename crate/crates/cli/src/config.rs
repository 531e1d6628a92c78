//! Run configuration: one JSON document, every field defaulted, unknown
//! keys rejected.

use std::path::Path;

use ionstain::model::{ConditionerConfig, DenoiserConfig};
use ionstain::phantom::PhantomConfig;
use ionstain::sampling::{SamplingConfig, Strategy};
use ionstain::schedule::ScheduleConfig;
use ionstain::training::TrainConfig;
use ionstain::{dataio, Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub sampling: SamplingConfig,
    pub data: DataSection,
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `in_channels` is overwritten with the size of the selected channel
    /// subset.
    pub conditioner: ConditionerConfig,
    pub denoiser: DenoiserConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub phantom: PhantomConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    /// TIC-normalize ion stacks before ranking and standardization. Needs
    /// nonnegative intensities.
    pub tic: bool,
    /// Keep the top `round(C / factor)` channels by SNR.
    pub reduction_factor: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::reference(64),
            train_samples: 200,
            test_samples: 36,
            tic: false,
            reduction_factor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub perceptual_seed: u64,
    pub histogram_bins: usize,
    pub niqe_patch: usize,
    /// Upper bound on ground-truth patches for the NIQE reference model.
    pub niqe_fit_patches: usize,
    /// Evaluate at most this many test FOVs (0 = all).
    pub max_fovs: usize,
    pub ablation_factors: Vec<usize>,
    /// Exit points as fractions of T.
    pub sweep_exit_fractions: Vec<f64>,
    /// Exit point, as a fraction of T, that published results found best.
    pub reference_exit_fraction: f64,
    pub cv_repeats: usize,
    pub cv_strategies: Vec<Strategy>,
    pub cv_exit_fraction: f64,
    pub spectrum_upsample: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            perceptual_seed: ionstain::quality::RandomConvExtractor::DEFAULT_SEED,
            histogram_bins: 64,
            niqe_patch: 32,
            niqe_fit_patches: 800,
            max_fovs: 0,
            ablation_factors: vec![1, 4, 16, 64],
            sweep_exit_fractions: vec![0.0, 0.02, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0],
            reference_exit_fraction: 0.1,
            cv_repeats: 5,
            cv_strategies: vec![Strategy::Vanilla, Strategy::Mean, Strategy::Skip],
            cv_exit_fraction: 0.1,
            spectrum_upsample: 10,
        }
    }
}

fn fraction(f: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("{what} {f} outside [0, 1]")));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = dataio::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        dataio::ensure_dir(dir)?;
        dataio::write_json(dir.join(CONFIG_FILE), self)
    }

    pub fn validate(&self) -> Result<()> {
        let sched = ionstain::schedule::BridgeSchedule::from_config(&self.schedule)?;
        self.model.conditioner.validate()?;
        self.model.denoiser.validate()?;
        self.training.validate()?;
        self.sampling.validate(&sched)?;
        self.data.phantom.validate()?;
        if self.data.reduction_factor == 0 {
            return Err(Error::InvalidArgument("reduction factor must be >= 1".into()));
        }
        let e = &self.evaluation;
        if e.histogram_bins == 0 || e.spectrum_upsample == 0 {
            return Err(Error::InvalidArgument("histogram bins and upsampling must be positive".into()));
        }
        if e.ablation_factors.is_empty() || e.ablation_factors.contains(&0) {
            return Err(Error::InvalidArgument("ablation factors must be positive".into()));
        }
        if e.cv_repeats < 2 {
            return Err(Error::InvalidArgument("CV needs at least two repeats".into()));
        }
        if e.cv_strategies.contains(&Strategy::Average) && self.sampling.inner == Strategy::Average {
            return Err(Error::InvalidArgument("averaged runs cannot themselves average".into()));
        }
        for &f in &e.sweep_exit_fractions {
            fraction(f, "sweep exit fraction")?;
        }
        fraction(e.reference_exit_fraction, "reference exit fraction")?;
        fraction(e.cv_exit_fraction, "CV exit fraction")?;
        Ok(())
    }

    /// Absolute exit time of a fraction of T.
    pub fn exit_time(&self, fraction: f64) -> usize {
        (fraction * self.schedule.steps as f64).round() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let sparse: RunConfig = serde_json::from_str(r#"{"training": {"steps": 3}}"#).unwrap();
        assert_eq!(sparse.training.steps, 3);
        assert_eq!(sparse.sampling, SamplingConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainin": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"evaluation": {"max_fov": 3}}"#).is_err());
    }

    #[test]
    fn exit_fractions_scale_with_t() {
        let mut cfg = RunConfig::default();
        cfg.schedule.steps = 200;
        assert_eq!(cfg.exit_time(0.1), 20);
        cfg.evaluation.sweep_exit_fractions = vec![1.5];
        assert!(cfg.validate().is_err());
    }
}
