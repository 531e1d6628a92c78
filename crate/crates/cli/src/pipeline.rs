//! Shared plumbing: run directories, channel selection, training runs and
//! per-FOV sampling.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ionstain::checkpoint::{CheckpointMeta, ModelCheckpoint};
use ionstain::dataio::{self, tic_normalize, ChannelManifest, IonNormalizer};
use ionstain::model::StainModel;
use ionstain::nn::Parameters;
use ionstain::phantom::{Dataset, PairedSample};
use ionstain::rng::derive_seed;
use ionstain::sampling::{sample_from_endpoint, Network, SampleOutput, SamplingConfig};
use ionstain::schedule::BridgeSchedule;
use ionstain::training::{train_to_dir, TrainState, TrainingSet};
use ionstain::{Error, ImageTensor, Result};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};

pub const RUN_LOG: &str = "run.log";
pub const CHANNELS_FILE: &str = "channels.json";
const INPUTS_FILE: &str = "inputs.json";

/// Line-oriented progress log; contents depend only on the inputs.
pub struct RunLog {
    path: PathBuf,
    file: File,
}

impl RunLog {
    pub fn create(dir: &Path) -> Result<Self> {
        dataio::ensure_dir(dir)?;
        let path = dir.join(RUN_LOG);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn line(&mut self, text: impl AsRef<str>) -> Result<()> {
        writeln!(self.file, "{}", text.as_ref()).map_err(|e| io_err(&self.path, e))
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes the resolved config and opens the run log.
pub fn start_run(cfg: &RunConfig, out: &Path) -> Result<RunLog> {
    cfg.save(out)?;
    RunLog::create(out)
}

/// Ion stack as seen by channel ranking and the normalizer.
pub fn prepare_ions(cfg: &RunConfig, ions: &ImageTensor) -> Result<ImageTensor> {
    if cfg.data.tic {
        tic_normalize(ions)
    } else {
        Ok(ions.clone())
    }
}

/// SNR ranking over the concatenated training stacks, reduced by the
/// configured factor.
pub fn select_channels(cfg: &RunConfig, train: &[PairedSample]) -> Result<ChannelManifest> {
    let stacks: Vec<ImageTensor> = train.iter().map(|s| prepare_ions(cfg, &s.ions)).collect::<Result<_>>()?;
    let refs: Vec<&ImageTensor> = stacks.iter().collect();
    let ranked = ChannelManifest::rank(&refs)?;
    dataio::select_top_k(&ranked, cfg.data.reduction_factor)
}

/// A trained model with everything needed to run it.
pub struct Trained {
    pub model: StainModel,
    pub params: Parameters,
    pub meta: CheckpointMeta,
    pub sched: BridgeSchedule,
}

impl Trained {
    pub fn load(dir: &Path) -> Result<Self> {
        let ck = ModelCheckpoint::load(dir)?;
        let model = ck.model()?;
        let sched = BridgeSchedule::from_config(&ck.meta.schedule)?;
        Ok(Self {
            model,
            params: ck.params,
            meta: ck.meta,
            sched,
        })
    }

    /// Bridge endpoint `x_T` of a raw ion stack.
    pub fn endpoint(&self, cfg: &RunConfig, ions: &ImageTensor) -> Result<ImageTensor> {
        let x = self.meta.normalizer.apply(&prepare_ions(cfg, ions)?)?;
        self.model.conditioner_forward(&self.params, &x)
    }

    pub fn sample(&self, x_end: &ImageTensor, sampling: &SamplingConfig) -> Result<SampleOutput> {
        let net = Network {
            model: &self.model,
            params: &self.params,
        };
        sample_from_endpoint(&net, &self.sched, x_end, sampling)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainInputs {
    data: PathBuf,
}

/// Trains into `out` (checkpoint in `out/final`). A finished run with the
/// same resolved config and data directory is reused as is.
pub fn train_run(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<PathBuf> {
    let data = Dataset::load(data_dir)?;
    let channels = select_channels(cfg, &data.train)?;
    let mut cfg = cfg.clone();
    cfg.model.conditioner.in_channels = channels.selected.len();
    cfg.validate()?;

    let final_dir = out.join("final");
    let inputs = TrainInputs {
        data: data_dir.canonicalize().map_err(|e| io_err(data_dir, e))?,
    };
    if final_dir.join(ionstain::checkpoint::MANIFEST).exists() {
        let same_cfg = dataio::read_json::<RunConfig>(out.join(CONFIG_FILE)).is_ok_and(|c| c == cfg);
        let same_inputs = dataio::read_json::<TrainInputs>(out.join(INPUTS_FILE)).is_ok_and(|i| i == inputs);
        if same_cfg && same_inputs {
            return Ok(final_dir);
        }
    }

    let mut log = start_run(&cfg, out)?;
    dataio::write_json(out.join(INPUTS_FILE), &inputs)?;
    channels.write(out.join(CHANNELS_FILE))?;
    let stacks: Vec<ImageTensor> = data.train.iter().map(|s| prepare_ions(&cfg, &s.ions)).collect::<Result<_>>()?;
    let refs: Vec<&ImageTensor> = stacks.iter().collect();
    let normalizer = IonNormalizer::fit(&refs, &channels.selected)?;
    let prepared: Vec<PairedSample> = data
        .train
        .iter()
        .zip(stacks)
        .map(|(s, ions)| PairedSample::new(ions, s.stain.clone(), s.labels.clone()))
        .collect::<Result<_>>()?;
    let augment = data
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == ionstain::phantom::Split::Train)
        .all(|e| e.augment);
    let set = TrainingSet::prepare(&prepared, &normalizer, augment)?;

    let model = StainModel::new(&cfg.model.conditioner, &cfg.model.denoiser)?;
    let sched = BridgeSchedule::from_config(&cfg.schedule)?;
    let meta = CheckpointMeta {
        step: 0,
        seed: cfg.training.seed,
        schedule: cfg.schedule,
        conditioner: cfg.model.conditioner.clone(),
        denoiser: cfg.model.denoiser.clone(),
        training: cfg.training.clone(),
        normalizer,
    };
    log.line(format!(
        "train\tsamples={}\tchannels={}\tparams={}\tsteps={}",
        set.len(),
        channels.selected.len(),
        model.init_params(0).numel(),
        cfg.training.steps
    ))?;
    let mut state = TrainState::fresh(model.init_params(cfg.training.seed));
    let losses = train_to_dir(&model, &sched, &meta, &set, &mut state, out)?;
    if let Some(last) = losses.last() {
        log.line(format!("done\tstep={}\tloss={last}", state.optimizer.step))?;
    }
    Ok(final_dir)
}

/// Resumes `checkpoint` up to the configured step count, logging into `out`.
pub fn resume_run(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let ck = ModelCheckpoint::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let model = ck.model()?;
    let sched = BridgeSchedule::from_config(&ck.meta.schedule)?;
    let meta = CheckpointMeta {
        training: cfg.training.clone(),
        ..ck.meta.clone()
    };
    let stacks: Vec<PairedSample> = data
        .train
        .iter()
        .map(|s| PairedSample::new(prepare_ions(cfg, &s.ions)?, s.stain.clone(), s.labels.clone()))
        .collect::<Result<_>>()?;
    let set = TrainingSet::prepare(&stacks, &meta.normalizer, true)?;
    let mut state = TrainState {
        params: ck.params,
        optimizer: ck.optimizer,
    };
    dataio::ensure_dir(out)?;
    train_to_dir(&model, &sched, &meta, &set, &mut state, out)?;
    Ok(out.join("final"))
}

/// Test FOVs in manifest order, truncated to `max_fovs` when set.
pub fn test_fovs<'a>(cfg: &RunConfig, data: &'a Dataset) -> Vec<(String, &'a PairedSample)> {
    let mut v: Vec<_> = data.test_ids().into_iter().map(String::from).zip(&data.test).collect();
    if cfg.evaluation.max_fovs > 0 {
        v.truncate(cfg.evaluation.max_fovs);
    }
    v
}

/// Sampling config of FOV `index`: the run seed is derived per FOV.
pub fn fov_sampling(base: &SamplingConfig, index: usize) -> SamplingConfig {
    SamplingConfig {
        seed: derive_seed(base.seed, index as u64),
        ..base.clone()
    }
}

/// Maps `f` over `items` on scoped threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|k| {
                s.spawn(move || {
                    (k..items.len())
                        .step_by(threads)
                        .map(|i| (i, f(i, &items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}
