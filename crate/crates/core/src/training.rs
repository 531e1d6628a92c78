//! Denoising objective, AdamW and the training loop.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, ModelCheckpoint};
use crate::dataio::{bytes_to_stain, dihedral, IonNormalizer};
use crate::error::{Error, Result};
use crate::model::StainModel;
use crate::nn::{Dims, Parameters, Tape};
use crate::phantom::{PairedSample, DOWNSAMPLE};
use crate::rng::{derive_seed, fill_normal, stream_rng, Seed};
use crate::schedule::BridgeSchedule;
use crate::tensor::ImageTensor;

pub const LOSS_LOG: &str = "loss.tsv";
const TRAIN_STREAM_TAG: u64 = 0x7472_6169_6e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    /// High-resolution crop side; a multiple of 10.
    pub crop: usize,
    /// Random dihedral transforms on samples flagged for augmentation.
    pub augment: bool,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: Seed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 1000,
            crop: 160,
            augment: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.crop == 0 || self.crop % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!("crop {} is not a positive multiple of 10", self.crop)));
        }
        let rates = [self.learning_rate, self.weight_decay, self.eps];
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("learning rate, weight decay and eps must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("moment decays must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// AdamW moments; `m` and `v` mirror the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Completed updates.
    pub step: u64,
    pub m: Parameters,
    pub v: Parameters,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let mut zeros = params.clone();
        zeros
            .entries_mut()
            .iter_mut()
            .for_each(|e| e.data.iter_mut().for_each(|x| *x = 0.0));
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `p ← p − lr·(wd·p + m̂ / (√v̂ + eps))` with bias-corrected moments.
    pub fn apply(&mut self, cfg: &TrainConfig, params: &mut Parameters, grads: &[Vec<f32>]) {
        self.step += 1;
        let k = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(k), 1.0 - b2.powi(k));
        let (lr, wd, eps) = (cfg.learning_rate, cfg.weight_decay, cfg.eps);
        let slots = params
            .entries_mut()
            .iter_mut()
            .zip(self.m.entries_mut())
            .zip(self.v.entries_mut())
            .zip(grads);
        for (((p, m), v), g) in slots {
            for (((pi, mi), vi), &gi) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(g) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = wd * *pi as f64 + (mn / c1) / ((vn / c2).sqrt() + eps);
                *pi = (*pi as f64 - lr * upd) as f32;
            }
        }
    }
}

/// Paired tensors ready for the model: standardized ions and stains in
/// [-1, 1].
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub ions: Vec<ImageTensor>,
    pub stains: Vec<ImageTensor>,
    pub augment: Vec<bool>,
}

impl TrainingSet {
    pub fn prepare(samples: &[PairedSample], normalizer: &IonNormalizer, augment: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let ions = samples
            .iter()
            .map(|s| normalizer.apply(&s.ions))
            .collect::<Result<Vec<_>>>()?;
        let stains = samples.iter().map(|s| bytes_to_stain(&s.stain)).collect();
        Ok(Self {
            ions,
            stains,
            augment: vec![augment; samples.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.ions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ions.is_empty()
    }
}

/// One batch element: which sample, where to crop, how to transform, and
/// which bridge state to visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    /// Ion-grid crop origin; the stain window starts at 10× these.
    pub ion_y: usize,
    pub ion_x: usize,
    pub transform: usize,
    pub t: usize,
    pub noise_seed: Seed,
}

/// The batch of step `step` (1-based), a pure function of the seed.
pub fn plan_step(cfg: &TrainConfig, sched: &BridgeSchedule, data: &TrainingSet, step: u64) -> Result<Vec<Draw>> {
    let mut rng = stream_rng(derive_seed(cfg.seed, TRAIN_STREAM_TAG), step);
    let crop = cfg.crop / DOWNSAMPLE;
    (0..cfg.batch_size)
        .map(|_| {
            let index = rng.random_range(0..data.len());
            let ions = &data.ions[index];
            if crop > ions.height() || crop > ions.width() {
                return Err(Error::invalid(format!(
                    "crop {} exceeds sample {index} ({}x{} ion pixels)",
                    cfg.crop,
                    ions.height(),
                    ions.width()
                )));
            }
            let ion_y = rng.random_range(0..=ions.height() - crop);
            let ion_x = rng.random_range(0..=ions.width() - crop);
            let transform = rng.random_range(0..8usize);
            let transform = if cfg.augment && data.augment[index] { transform } else { 0 };
            let t = rng.random_range(1..=sched.steps());
            let noise_seed = rng.random::<u64>();
            Ok(Draw {
                index,
                ion_y,
                ion_x,
                transform,
                t,
                noise_seed,
            })
        })
        .collect()
}

/// Cropped and transformed (ions, x0) pair of a draw.
pub fn materialize(cfg: &TrainConfig, data: &TrainingSet, d: &Draw) -> Result<(ImageTensor, ImageTensor)> {
    let crop = cfg.crop / DOWNSAMPLE;
    let ions = data.ions[d.index].crop(d.ion_y, d.ion_x, crop, crop)?;
    let x0 = data.stains[d.index].crop(DOWNSAMPLE * d.ion_y, DOWNSAMPLE * d.ion_x, cfg.crop, cfg.crop)?;
    Ok((dihedral(&ions, d.transform)?, dihedral(&x0, d.transform)?))
}

#[allow(clippy::too_many_arguments)]
/// `mse(D(x_t, x_T, t), x_t − x0)` for one example, with `x_t` drawn from
/// the bridge marginal using stream `t` of `noise_seed`. Returns the loss
/// and, when `grad_scale` is given, parameter gradients scaled by it.
pub fn example_loss(
    model: &StainModel,
    p: &[Vec<f32>],
    sched: &BridgeSchedule,
    ions: &ImageTensor,
    x0: &ImageTensor,
    t: usize,
    noise_seed: Seed,
    grad_scale: Option<f32>,
) -> Result<(f64, Option<Vec<Option<Vec<f32>>>>)> {
    let mut tape = Tape::<f32>::new();
    let iv = tape.input(Dims::new(ions.channels(), ions.height(), ions.width()), ions.data().to_vec());
    let x_end = model.conditioner_on(&mut tape, p, iv);
    let dims = tape.dims(x_end);
    if (dims.c, dims.h, dims.w) != x0.shape() {
        return Err(Error::invalid(format!(
            "conditioner output {}x{}x{} does not match the target {:?}",
            dims.c,
            dims.h,
            dims.w,
            x0.shape()
        )));
    }
    let (m, sd) = (sched.m(t), sched.delta(t).sqrt());
    let mut eps = vec![0f32; x0.len()];
    if sd > 0.0 {
        fill_normal(noise_seed, t as u64, &mut eps);
    }
    let offset: Vec<f32> = x0
        .data()
        .iter()
        .zip(&eps)
        .map(|(&a, &e)| ((1.0 - m) * a as f64 + sd * e as f64) as f32)
        .collect();
    let x_t = tape.affine(x_end, m as f32, &offset);
    let d = model.denoiser_on(&mut tape, p, x_t, x_end, t, sched.steps())?;
    let x0v = tape.input(dims, x0.data().to_vec());
    let target = tape.sub(x_t, x0v);
    let loss = tape.mse(d, target);
    let value = tape.value(loss)[0] as f64;
    let grads = match grad_scale {
        Some(s) => Some(tape.backward(loss, &[s], p.len())?.slots),
        None => None,
    };
    Ok((value, grads))
}

/// Mean loss of a planned batch, and its parameter gradients.
pub fn batch_loss(
    model: &StainModel,
    params: &Parameters,
    sched: &BridgeSchedule,
    cfg: &TrainConfig,
    data: &TrainingSet,
    draws: &[Draw],
) -> Result<(f64, Vec<Vec<f32>>)> {
    if draws.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let p = params.values::<f32>();
    let mut acc: Vec<Vec<f32>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
    let scale = 1.0 / draws.len() as f32;
    let mut total = 0.0;
    for d in draws {
        let (ions, x0) = materialize(cfg, data, d)?;
        let (l, g) = example_loss(model, &p, sched, &ions, &x0, d.t, d.noise_seed, Some(scale))?;
        total += l;
        for (a, g) in acc.iter_mut().zip(g.expect("gradients requested")) {
            if let Some(g) = g {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
    }
    Ok((total / draws.len() as f64, acc))
}

/// Parameters and optimizer moments being trained.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn fresh(params: Parameters) -> Self {
        let optimizer = OptimizerState::new(&params);
        Self { params, optimizer }
    }
}

/// One AdamW update on the batch planned for the next step.
pub fn train_step(
    model: &StainModel,
    sched: &BridgeSchedule,
    cfg: &TrainConfig,
    data: &TrainingSet,
    state: &mut TrainState,
) -> Result<f64> {
    let step = state.optimizer.step + 1;
    let draws = plan_step(cfg, sched, data, step)?;
    let (loss, grads) = batch_loss(model, &state.params, sched, cfg, data, &draws)?;
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDiverged { step, loss });
    }
    state.optimizer.apply(cfg, &mut state.params, &grads);
    if !state.params.all_finite() {
        return Err(Error::TrainingDiverged { step, loss });
    }
    Ok(loss)
}

/// Runs steps until `cfg.steps`, calling `on_step(step, loss, state)`
/// after each one. Returns the losses of the steps run here.
pub fn train(
    model: &StainModel,
    sched: &BridgeSchedule,
    cfg: &TrainConfig,
    data: &TrainingSet,
    state: &mut TrainState,
    mut on_step: impl FnMut(u64, f64, &TrainState) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    model.check_params(&state.params)?;
    let mut losses = Vec::new();
    while state.optimizer.step < cfg.steps {
        let loss = train_step(model, sched, cfg, data, state)?;
        losses.push(loss);
        on_step(state.optimizer.step, loss, state)?;
    }
    Ok(losses)
}

/// `train` with a loss log and checkpoints under `out`. The log is
/// appended to, so a resumed run continues the same file.
pub fn train_to_dir(
    model: &StainModel,
    sched: &BridgeSchedule,
    meta: &CheckpointMeta,
    data: &TrainingSet,
    state: &mut TrainState,
    out: impl AsRef<Path>,
) -> Result<Vec<f64>> {
    let out = out.as_ref();
    crate::dataio::ensure_dir(out)?;
    let log_path = out.join(LOSS_LOG);
    let mut log = if state.optimizer.step == 0 {
        let mut f = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "step\tloss").map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    };
    let cfg = &meta.training;
    let save = |state: &TrainState, dir: &Path| {
        ModelCheckpoint {
            meta: CheckpointMeta {
                step: state.optimizer.step,
                ..meta.clone()
            },
            params: state.params.clone(),
            optimizer: state.optimizer.clone(),
        }
        .save(dir)
    };
    let losses = train(model, sched, cfg, data, state, |step, loss, st| {
        writeln!(log, "{step}\t{loss}").map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(st, &out.join(format!("step_{step:06}")))?;
        }
        Ok(())
    })?;
    save(state, &out.join("final"))?;
    Ok(losses)
}

/// Parses a loss log back into `(step, loss)` rows.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i > 0 {
            let bad = || Error::parse(offset, format!("malformed loss row {line:?}"));
            let (s, l) = line.split_once('\t').ok_or_else(bad)?;
            rows.push((s.parse().map_err(|_| bad())?, l.parse().map_err(|_| bad())?));
        }
        offset += line.len() + 1;
    }
    Ok(rows)
}
