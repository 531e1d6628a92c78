//! Kidney-like synthetic phantoms: a labelled structure map rendered as a
//! PAS-like RGB target and as a blurred, mean-pooled, noisy ion stack.

use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fill_normal, normal_vec_f64, stream_rng, Seed};
use crate::tensor::{ImageTensor, ValueRange};

/// Stain pixels per ion pixel along each axis.
pub const DOWNSAMPLE: usize = 10;

pub const BACKGROUND: u8 = 0;
pub const GLOMERULUS: u8 = 1;
pub const PROXIMAL: u8 = 2;
pub const DISTAL: u8 = 3;
pub const NUCLEUS: u8 = 4;
pub const LUMEN: u8 = 5;
pub const CLASSES: usize = 6;

/// RGB per label code, PAS-like.
pub const PALETTE: [[f32; 3]; CLASSES] = [
    [235.0, 200.0, 215.0], // pale pink interstitium
    [200.0, 110.0, 170.0], // magenta glomerular tuft
    [215.0, 120.0, 175.0], // proximal epithelium
    [225.0, 160.0, 200.0], // distal epithelium, paler
    [70.0, 40.0, 110.0],   // dark purple nuclei
    [250.0, 245.0, 248.0], // near-white lumen
];

/// Log-normal spread of the class signatures.
const SIGNATURE_SIGMA: f64 = 0.6;
/// Offset between the train and test seed ranges.
const TEST_SEED_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// High-resolution height and width, multiples of 10.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Expected structure counts per 100×100 high-resolution pixels.
    pub glomeruli: f64,
    pub proximal: f64,
    pub distal: f64,
    pub nuclei: f64,
    /// Gaussian noise standard deviation per ion channel.
    pub noise: Vec<f64>,
    /// Point-spread width in high-resolution pixels.
    pub blur: f64,
    /// Standard deviation of the stain texture, in 8-bit units.
    pub texture: f64,
    /// Seeds the class signatures, shared by every sample of a dataset.
    pub signature_seed: Seed,
    /// Seeds the structures and noise of one sample.
    pub seed: Seed,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::reference(16)
    }
}

impl PhantomConfig {
    /// 160×160 tiles with noise rising linearly from 0.05 to 0.8 across
    /// the channels.
    pub fn reference(channels: usize) -> Self {
        let noise = (0..channels)
            .map(|c| 0.05 + 0.75 * c as f64 / (channels.max(2) - 1) as f64)
            .collect();
        Self {
            height: 160,
            width: 160,
            channels,
            glomeruli: 0.25,
            proximal: 2.0,
            distal: 1.2,
            nuclei: 12.0,
            noise,
            blur: 2.0,
            texture: 4.0,
            signature_seed: 7,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("phantom size must be positive"));
        }
        if self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!(
                "phantom size {}x{} is not a multiple of {DOWNSAMPLE}",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::invalid("phantom needs at least one channel"));
        }
        if self.noise.len() != self.channels {
            return Err(Error::invalid(format!(
                "{} noise levels for {} channels",
                self.noise.len(),
                self.channels
            )));
        }
        let all = [self.glomeruli, self.proximal, self.distal, self.nuclei, self.blur, self.texture];
        if self.noise.iter().chain(&all).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("densities, noise, blur and texture must be nonnegative"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: Seed) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// C×(H/10)×(W/10).
    pub ions: ImageTensor,
    /// 3×H×W in [0, 255].
    pub stain: ImageTensor,
    /// H×W label codes.
    pub labels: Vec<u8>,
}

impl PairedSample {
    pub fn new(ions: ImageTensor, stain: ImageTensor, labels: Vec<u8>) -> Result<Self> {
        if stain.channels() != 3 {
            return Err(Error::invalid("stain must have 3 channels"));
        }
        if stain.height() != DOWNSAMPLE * ions.height() || stain.width() != DOWNSAMPLE * ions.width() {
            return Err(Error::invalid("stain is not 10x the ion grid"));
        }
        if labels.len() != stain.plane_len() || labels.iter().any(|&l| l as usize >= CLASSES) {
            return Err(Error::invalid("label map does not match the stain"));
        }
        Ok(Self { ions, stain, labels })
    }
}

/// Class signatures, `[class][channel]`, log-normal with unit median.
pub fn signatures(config: &PhantomConfig) -> Vec<Vec<f64>> {
    (0..CLASSES)
        .map(|k| {
            normal_vec_f64(config.signature_seed, k as u64, config.channels)
                .into_iter()
                .map(|z| (SIGNATURE_SIGMA * z).exp())
                .collect()
        })
        .collect()
}

/// Rasterized structure map.
pub fn rasterize(config: &PhantomConfig) -> Vec<u8> {
    let (h, w) = (config.height, config.width);
    let mut labels = vec![BACKGROUND; h * w];
    let mut rng = stream_rng(config.seed, 0);
    let area = (h * w) as f64 / 1e4;

    for _ in 0..count(&mut rng, config.glomeruli * area) {
        let (cy, cx) = centre(&mut rng, h, w);
        let r = rng.random_range(18.0..25.0);
        disk(&mut labels, w, cy, cx, r, GLOMERULUS);
    }
    for (density, class, lumen) in [
        (config.proximal, PROXIMAL, 3.0..5.0),
        (config.distal, DISTAL, 5.0..8.0),
    ] {
        for _ in 0..count(&mut rng, density * area) {
            let (cy, cx) = centre(&mut rng, h, w);
            let outer = rng.random_range(10.0..16.0);
            let inner = rng.random_range(lumen.clone());
            disk(&mut labels, w, cy, cx, outer, class);
            disk(&mut labels, w, cy, cx, inner, LUMEN);
        }
    }
    for _ in 0..count(&mut rng, config.nuclei * area) {
        let (cy, cx) = centre(&mut rng, h, w);
        let r = rng.random_range(2.0..3.0);
        disk(&mut labels, w, cy, cx, r, NUCLEUS);
    }
    labels
}

fn count(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let d = Poisson::new(lambda).expect("positive rate");
    d.sample(rng) as usize
}

fn centre(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (f64, f64) {
    (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64))
}

fn disk(labels: &mut [u8], w: usize, cy: f64, cx: f64, r: f64, class: u8) {
    let h = labels.len() / w;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r * r {
                labels[y * w + x] = class;
            }
        }
    }
}

/// Palette colour plus Gaussian texture, rounded to integers in [0, 255].
pub fn render_stain(config: &PhantomConfig, labels: &[u8]) -> ImageTensor {
    let n = config.height * config.width;
    let mut noise = vec![0f32; 3 * n];
    fill_normal(config.seed, 1, &mut noise);
    let tex = config.texture as f32;
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        for (p, &l) in labels.iter().enumerate() {
            let v = PALETTE[l as usize][c] + tex * noise[c * n + p];
            data.push(v.round().clamp(0.0, 255.0));
        }
    }
    ImageTensor::new(3, config.height, config.width, data, ValueRange::BYTE)
        .expect("finite stain")
}

/// Class indicators blurred by the point spread, `[class][pixel]`.
pub fn blurred_indicators(labels: &[u8], h: usize, w: usize, sigma: f64) -> Vec<Vec<f64>> {
    (0..CLASSES as u8)
        .map(|k| {
            let ind: Vec<f64> = labels.iter().map(|&l| (l == k) as u8 as f64).collect();
            gaussian_blur(&ind, h, w, sigma)
        })
        .collect()
}

/// Noiseless high-resolution ion map `Σ_k signature_k · blur(indicator_k)`.
pub fn ion_field(
    labels: &[u8],
    h: usize,
    w: usize,
    signatures: &[Vec<f64>],
    sigma: f64,
) -> Vec<Vec<f64>> {
    let ind = blurred_indicators(labels, h, w, sigma);
    let channels = signatures.first().map_or(0, Vec::len);
    (0..channels)
        .map(|c| {
            let mut out = vec![0f64; h * w];
            for (k, plane) in ind.iter().enumerate() {
                let s = signatures[k][c];
                out.iter_mut().zip(plane).for_each(|(o, v)| *o += s * v);
            }
            out
        })
        .collect()
}

/// Separable Gaussian blur with clamped edges; identity for `sigma == 0`.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * src[y * w + clamp(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clamp(y as isize + j as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// One paired sample, fully determined by the config.
pub fn generate(config: &PhantomConfig) -> Result<PairedSample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let labels = rasterize(config);
    let stain = render_stain(config, &labels);
    let field = ion_field(&labels, h, w, &signatures(config), config.blur);

    let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
    let mut noise = vec![0f32; config.channels * lh * lw];
    fill_normal(config.seed, 2, &mut noise);
    let inv = 1.0 / (DOWNSAMPLE * DOWNSAMPLE) as f64;
    let mut data = Vec::with_capacity(noise.len());
    for (c, plane) in field.iter().enumerate() {
        for y in 0..lh {
            for x in 0..lw {
                let mut s = 0f64;
                for dy in 0..DOWNSAMPLE {
                    let row = (y * DOWNSAMPLE + dy) * w + x * DOWNSAMPLE;
                    s += plane[row..row + DOWNSAMPLE].iter().sum::<f64>();
                }
                let z = noise[data.len()] as f64;
                data.push((s * inv + config.noise[c] * z) as f32);
            }
        }
    }
    let ions = ImageTensor::new(config.channels, lh, lw, data, ValueRange::UNBOUNDED)?;
    PairedSample::new(ions, stain, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub seed: Seed,
    /// Whether training may apply dihedral augmentation.
    pub augment: bool,
    /// Paths relative to the manifest directory.
    pub ions: PathBuf,
    pub stain: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub phantom: PhantomConfig,
    pub entries: Vec<DatasetEntry>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// Seed of sample `index` within a split; the two ranges never meet for
/// fewer than 2^40 samples per split.
pub fn split_seed(base: Seed, split: Split, index: usize) -> Seed {
    let offset = match split {
        Split::Train => 0,
        Split::Test => TEST_SEED_OFFSET,
    };
    derive_seed(base, offset + index as u64)
}

/// Samples of a split, in memory.
pub fn generate_split(
    config: &PhantomConfig,
    split: Split,
    n: usize,
) -> Result<Vec<PairedSample>> {
    (0..n)
        .map(|i| generate(&config.with_seed(split_seed(config.seed, split, i))))
        .collect()
}

/// Writes `n_train + n_test` samples and `dataset.json` to `out`.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_train: usize,
    n_test: usize,
    out: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    config.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("both splits need at least one sample"));
    }
    let out = out.as_ref();
    dataio::ensure_dir(out)?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let dir = out.join(tag);
        dataio::ensure_dir(&dir)?;
        for i in 0..n {
            let seed = split_seed(config.seed, split, i);
            let s = generate(&config.with_seed(seed))?;
            let id = format!("{tag}_{i:04}");
            let rel = |kind: &str| PathBuf::from(tag).join(format!("{id}.{kind}.vstn"));
            let entry = DatasetEntry {
                id: id.clone(),
                split,
                seed,
                augment: split == Split::Train,
                ions: rel("ions"),
                stain: rel("stain"),
                labels: rel("labels"),
            };
            dataio::write_image(out.join(&entry.ions), &s.ions)?;
            let stain_bytes = s.stain.data().iter().map(|&v| v as u8).collect();
            let (h, w) = (s.stain.height() as u32, s.stain.width() as u32);
            TensorFile::new(vec![3, h, w], TensorData::U8(stain_bytes))?
                .write(out.join(&entry.stain))?;
            TensorFile::from_labels(&s.labels, h as usize, w as usize)?
                .write(out.join(&entry.labels))?;
            entries.push(entry);
        }
    }
    let manifest = DatasetManifest {
        phantom: config.clone(),
        entries,
    };
    dataio::write_json(out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = dataio::read_json(dir.join(MANIFEST_FILE))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for e in &manifest.entries {
            let ions = dataio::read_image(dir.join(&e.ions), ValueRange::UNBOUNDED)?;
            let stain = dataio::read_image(dir.join(&e.stain), ValueRange::BYTE)?;
            let labels = match TensorFile::read(dir.join(&e.labels))?.data {
                TensorData::U8(v) => v,
                _ => return Err(Error::invalid(format!("labels of {} are not u8", e.id))),
            };
            let s = PairedSample::new(ions, stain, labels)?;
            match e.split {
                Split::Train => train.push(s),
                Split::Test => test.push(s),
            }
        }
        Ok(Self { manifest, train, test })
    }

    pub fn test_ids(&self) -> Vec<&str> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| e.id.as_str())
            .collect()
    }
}
