//! Conditioner and time-conditioned denoiser.
//!
//! The conditioner maps a standardized C×h×w ion stack to the bridge
//! endpoint `x_T` (3×rh×rw) with a 1×1 embedding followed by staged
//! pixel-shuffle upsampling. The denoiser is a small U-Net that sees the
//! channel concatenation of `x_t` and `x_T` and predicts `D ≈ x_t - x_0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{AttnBlock, Conv, Dense, Norm, ResBlock};
use crate::nn::{Dims, ParamBuilder, Parameters, Real, Tape, Var};
use crate::rng::Seed;
use crate::tensor::{ImageTensor, ValueRange};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionerConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub upsample_factor: usize,
    pub out_channels: usize,
    /// Pixel-shuffle factors applied in order; their product is the
    /// upsample factor.
    pub stages: Vec<usize>,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        Self {
            in_channels: 64,
            hidden_channels: 32,
            upsample_factor: 10,
            out_channels: 3,
            stages: vec![2, 5],
        }
    }
}

impl ConditionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("conditioner widths must be positive"));
        }
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::invalid("conditioner needs at least one nonzero shuffle stage"));
        }
        let prod: usize = self.stages.iter().product();
        if prod != self.upsample_factor {
            return Err(Error::invalid(format!(
                "shuffle stages {:?} multiply to {prod}, not the upsample factor {}",
                self.stages, self.upsample_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Level indices (0 = full resolution) that get self-attention.
    pub attention_levels: Vec<usize>,
    pub time_embedding_dim: usize,
    pub res_blocks: usize,
    pub groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2, 4],
            attention_levels: vec![3],
            time_embedding_dim: 64,
            res_blocks: 1,
            groups: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::invalid("denoiser needs at least one level"));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::invalid("denoiser widths must be positive"));
        }
        if self.res_blocks == 0 {
            return Err(Error::invalid("denoiser needs at least one residual block per level"));
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::invalid("time embedding width must be even and >= 2"));
        }
        if self.groups == 0 {
            return Err(Error::invalid("group count must be positive"));
        }
        for l in 0..self.levels() {
            if self.width(l) % self.groups != 0 {
                return Err(Error::invalid(format!(
                    "level {l} width {} not divisible by {} groups",
                    self.width(l),
                    self.groups
                )));
            }
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return Err(Error::invalid(format!("attention level {l} does not exist")));
        }
        Ok(())
    }

    /// Checks that an H×W input reaches the deepest level at size >= 4.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.levels() - 1);
        if h % f != 0 || w % f != 0 || h / f < 4 || w / f < 4 {
            return Err(Error::invalid(format!(
                "{h}x{w} input incompatible with {} levels (needs multiples of {f} and deepest size >= 4)",
                self.levels()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConditionerNet {
    embed: Conv,
    stages: Vec<(Conv, usize)>,
}

#[derive(Debug, Clone)]
struct DownLevel {
    pool_conv: Option<Conv>,
    blocks: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    up_conv: Option<Conv>,
    blocks: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
}

#[derive(Debug, Clone)]
struct DenoiserNet {
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    norm_out: Norm,
    conv_out: Conv,
}

/// Architecture of the full virtual-staining network.
#[derive(Debug)]
pub struct StainModel {
    cond_cfg: ConditionerConfig,
    den_cfg: DenoiserConfig,
    cond: ConditionerNet,
    den: DenoiserNet,
    builder: ParamBuilder,
}

impl StainModel {
    pub fn new(cond_cfg: &ConditionerConfig, den_cfg: &DenoiserConfig) -> Result<Self> {
        cond_cfg.validate()?;
        den_cfg.validate()?;
        let mut pb = ParamBuilder::default();
        let cond = build_conditioner(&mut pb, cond_cfg);
        let den = build_denoiser(&mut pb, den_cfg, cond_cfg.out_channels);
        Ok(Self {
            cond_cfg: cond_cfg.clone(),
            den_cfg: den_cfg.clone(),
            cond,
            den,
            builder: pb,
        })
    }

    pub fn conditioner_config(&self) -> &ConditionerConfig {
        &self.cond_cfg
    }

    pub fn denoiser_config(&self) -> &DenoiserConfig {
        &self.den_cfg
    }

    /// Number of parameter tensors.
    pub fn slot_count(&self) -> usize {
        self.builder.count()
    }

    /// Fan-in scaled normal weights, zero biases, unit norm gains; the
    /// denoiser's output convolution starts at exactly zero.
    pub fn init_params(&self, seed: Seed) -> Parameters {
        self.builder.materialize(seed)
    }

    pub fn check_params(&self, params: &Parameters) -> Result<()> {
        if !params.same_layout(&self.builder.materialize(0)) {
            return Err(Error::invalid("parameters do not match the model layout"));
        }
        Ok(())
    }

    fn check_ions(&self, ions: &ImageTensor) -> Result<()> {
        if ions.channels() != self.cond_cfg.in_channels {
            return Err(Error::invalid(format!(
                "conditioner expects {} ion channels, got {}",
                self.cond_cfg.in_channels,
                ions.channels()
            )));
        }
        Ok(())
    }

    /// Records the conditioner on `tape`.
    pub fn conditioner_on<T: Real>(&self, tape: &mut Tape<T>, p: &[Vec<T>], ions: Var) -> Var {
        let mut h = self.cond.embed.apply(tape, p, ions);
        h = tape.silu(h);
        let last = self.cond.stages.len() - 1;
        for (i, (conv, r)) in self.cond.stages.iter().enumerate() {
            h = conv.apply(tape, p, h);
            h = tape.pixel_shuffle(h, *r);
            if i != last {
                h = tape.silu(h);
            }
        }
        h
    }

    /// Records the denoiser on `tape`; returns `D`.
    pub fn denoiser_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Vec<T>],
        x_t: Var,
        x_end: Var,
        t: usize,
        steps: usize,
    ) -> Result<Var> {
        let d = tape.dims(x_t);
        if d != tape.dims(x_end) {
            return Err(Error::invalid("x_t and x_T differ in shape"));
        }
        if t > steps {
            return Err(Error::invalid(format!("t={t} > T={steps}")));
        }
        self.den_cfg.check_spatial(d.h, d.w)?;
        let net = &self.den;
        let emb = timestep_embedding::<T>(t, steps, self.den_cfg.time_embedding_dim);
        let emb = tape.input(Dims::new(emb.len(), 1, 1), emb);
        let temb = net.time1.apply(tape, p, emb);
        let temb = tape.silu(temb);
        let temb = net.time2.apply(tape, p, temb);
        let temb = tape.silu(temb);

        let x = tape.concat(x_t, x_end);
        let mut h = net.conv_in.apply(tape, p, x);
        let mut skips = Vec::with_capacity(net.down.len());
        for level in &net.down {
            if let Some(conv) = &level.pool_conv {
                h = tape.avg_pool(h, 2);
                h = conv.apply(tape, p, h);
            }
            for (j, block) in level.blocks.iter().enumerate() {
                h = block.apply(tape, p, h, temb);
                if let Some(a) = level.attn.get(j) {
                    h = a.apply(tape, p, h);
                }
            }
            skips.push(h);
        }
        h = net.mid1.apply(tape, p, h, temb);
        if let Some(a) = &net.mid_attn {
            h = a.apply(tape, p, h);
        }
        h = net.mid2.apply(tape, p, h, temb);
        for level in &net.up {
            if let Some(conv) = &level.up_conv {
                h = tape.upsample(h, 2);
                h = conv.apply(tape, p, h);
            }
            let skip = skips.pop().expect("one skip per level");
            h = tape.concat(h, skip);
            for (j, block) in level.blocks.iter().enumerate() {
                h = block.apply(tape, p, h, temb);
                if let Some(a) = level.attn.get(j) {
                    h = a.apply(tape, p, h);
                }
            }
        }
        h = net.norm_out.apply(tape, p, h);
        h = tape.silu(h);
        Ok(net.conv_out.apply(tape, p, h))
    }

    /// Bridge endpoint `x_T` for a standardized ion stack.
    pub fn conditioner_forward(&self, params: &Parameters, ions: &ImageTensor) -> Result<ImageTensor> {
        self.check_ions(ions)?;
        let p = params.values::<f32>();
        let mut tape = Tape::<f32>::new();
        let x = tape.input(
            Dims::new(ions.channels(), ions.height(), ions.width()),
            ions.data().to_vec(),
        );
        let out = self.conditioner_on(&mut tape, &p, x);
        tensor_from_tape(&tape, out, ValueRange::STAIN)
    }

    pub fn denoiser_forward(
        &self,
        params: &Parameters,
        x_t: &ImageTensor,
        x_end: &ImageTensor,
        t: usize,
        steps: usize,
    ) -> Result<ImageTensor> {
        x_t.ensure_same_shape(x_end, "denoiser_forward")?;
        if x_t.channels() != self.cond_cfg.out_channels {
            return Err(Error::invalid(format!(
                "denoiser expects {} channels, got {}",
                self.cond_cfg.out_channels,
                x_t.channels()
            )));
        }
        let p = params.values::<f32>();
        let mut tape = Tape::<f32>::new();
        let dims = Dims::new(x_t.channels(), x_t.height(), x_t.width());
        let a = tape.input(dims, x_t.data().to_vec());
        let b = tape.input(dims, x_end.data().to_vec());
        let out = self.denoiser_on(&mut tape, &p, a, b, t, steps)?;
        tensor_from_tape(&tape, out, ValueRange::UNBOUNDED)
    }
}

/// Convenience wrapper over [`StainModel::init_params`].
pub fn init_params(
    cond_cfg: &ConditionerConfig,
    den_cfg: &DenoiserConfig,
    seed: Seed,
) -> Result<Parameters> {
    Ok(StainModel::new(cond_cfg, den_cfg)?.init_params(seed))
}

/// `x̂_0 = clamp(x_t - D, -1, 1)`.
pub fn predict_x0(x_t: &ImageTensor, d: &ImageTensor) -> Result<ImageTensor> {
    x_t.ensure_same_shape(d, "predict_x0")?;
    let data = x_t
        .data()
        .iter()
        .zip(d.data())
        .map(|(&x, &dv)| (x - dv).clamp(-1.0, 1.0))
        .collect();
    ImageTensor::new(x_t.channels(), x_t.height(), x_t.width(), data, ValueRange::STAIN)
}

/// Sinusoidal features of `1000 t / T`, sines then cosines.
pub fn timestep_embedding<T: Real>(t: usize, steps: usize, dim: usize) -> Vec<T> {
    let pos = 1000.0 * t as f64 / steps as f64;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
    out.extend((0..half).map(|i| T::of((pos * freq(i)).sin())));
    out.extend((0..half).map(|i| T::of((pos * freq(i)).cos())));
    out
}

fn tensor_from_tape(tape: &Tape<f32>, v: Var, range: ValueRange) -> Result<ImageTensor> {
    let d = tape.dims(v);
    let t = ImageTensor::new(d.c, d.h, d.w, tape.value(v).to_vec(), range)
        .map_err(|_| Error::Numerical("network produced a non-finite value".into()))?;
    Ok(t)
}

fn build_conditioner(pb: &mut ParamBuilder, cfg: &ConditionerConfig) -> ConditionerNet {
    let hid = cfg.hidden_channels;
    let embed = Conv::declare(pb, "cond.embed", cfg.in_channels, hid, 1);
    let last = cfg.stages.len() - 1;
    let stages = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let out = if i == last { cfg.out_channels } else { hid };
            (Conv::declare(pb, &format!("cond.up{i}"), hid, out * r * r, 3), r)
        })
        .collect();
    ConditionerNet { embed, stages }
}

fn build_denoiser(pb: &mut ParamBuilder, cfg: &DenoiserConfig, img_channels: usize) -> DenoiserNet {
    let e = cfg.time_embedding_dim;
    let g = cfg.groups;
    let levels = cfg.levels();
    let attn_at = |l: usize| cfg.attention_levels.contains(&l);
    let time1 = Dense::declare(pb, "den.time1", e, e);
    let time2 = Dense::declare(pb, "den.time2", e, e);
    let conv_in = Conv::declare(pb, "den.in", 2 * img_channels, cfg.width(0), 3);

    let mut down = Vec::with_capacity(levels);
    for l in 0..levels {
        let ch = cfg.width(l);
        let pool_conv = (l > 0)
            .then(|| Conv::declare(pb, &format!("den.down{l}.pool"), cfg.width(l - 1), ch, 3));
        let mut blocks = Vec::new();
        let mut attn = Vec::new();
        for j in 0..cfg.res_blocks {
            blocks.push(ResBlock::declare(pb, &format!("den.down{l}.res{j}"), ch, ch, e, g));
            if attn_at(l) {
                attn.push(AttnBlock::declare(pb, &format!("den.down{l}.attn{j}"), ch, g));
            }
        }
        down.push(DownLevel {
            pool_conv,
            blocks,
            attn,
        });
    }

    let deep = cfg.width(levels - 1);
    let mid1 = ResBlock::declare(pb, "den.mid.res1", deep, deep, e, g);
    let mid_attn = attn_at(levels - 1).then(|| AttnBlock::declare(pb, "den.mid.attn", deep, g));
    let mid2 = ResBlock::declare(pb, "den.mid.res2", deep, deep, e, g);

    let mut up = Vec::with_capacity(levels);
    for l in (0..levels).rev() {
        let ch = cfg.width(l);
        let up_conv = (l + 1 < levels)
            .then(|| Conv::declare(pb, &format!("den.up{l}.upconv"), cfg.width(l + 1), ch, 3));
        let mut blocks = Vec::new();
        let mut attn = Vec::new();
        for j in 0..cfg.res_blocks {
            let cin = if j == 0 { 2 * ch } else { ch };
            blocks.push(ResBlock::declare(pb, &format!("den.up{l}.res{j}"), cin, ch, e, g));
            if attn_at(l) {
                attn.push(AttnBlock::declare(pb, &format!("den.up{l}.attn{j}"), ch, g));
            }
        }
        up.push(UpLevel {
            up_conv,
            blocks,
            attn,
        });
    }

    let norm_out = Norm::declare(pb, "den.out_norm", cfg.width(0), g);
    let conv_out = Conv::declare_with(pb, "den.out", cfg.width(0), img_channels, 3, true);
    DenoiserNet {
        time1,
        time2,
        conv_in,
        down,
        mid1,
        mid_attn,
        mid2,
        up,
        norm_out,
        conv_out,
    }
}
