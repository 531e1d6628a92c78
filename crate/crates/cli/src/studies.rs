//! The evaluation studies: channel ablation, exit sweep, repeatability and
//! the radial spectrum comparison.

use std::fmt::Write as _;
use std::path::Path;

use ionstain::dataio::{self, write_image};
use ionstain::fmt::sig;
use ionstain::phantom::{Dataset, PairedSample, DOWNSAMPLE, GLOMERULUS};
use ionstain::quality::{
    bilinear_upsample, evaluate_pair, grayscale, mean_cv, niqe_features, niqe_fit, niqe_score, paired_t_test,
    radial_power_spectrum, stain_to_unit, ycbcr_cv_map, Alternative, MetricReport, MvgModel, RandomConvExtractor,
    TTest,
};
use ionstain::sampling::{repeat_from_endpoint, save_stain, Network, SamplingConfig, Strategy};
use ionstain::{Error, ImageTensor, Result};
use serde::{Deserialize, Serialize};

use crate::commands::{byte_to_unit, endpoints, fid_proxy, sample_endpoints, METRICS_FILE};
use crate::config::RunConfig;
use crate::pipeline::{fov_sampling, par_map, start_run, test_fovs, train_run, write_text, Trained};

pub const ABLATION_FILE: &str = "ablation.tsv";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const CV_FILE: &str = "cv.tsv";
pub const SPECTRUM_FILE: &str = "spectrum.tsv";

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationModel {
    pub factor: usize,
    pub channels: usize,
    pub psnr: Vec<f64>,
    pub perceptual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTest {
    pub more: usize,
    pub fewer: usize,
    /// H1: the model with more channels has higher PSNR.
    pub psnr: TTest,
    /// H1: the model with more channels has lower perceptual distance.
    pub perceptual: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Ordered by channel count, largest first.
    pub models: Vec<AblationModel>,
    /// Adjacent pairs, then largest vs smallest when those are not adjacent.
    pub tests: Vec<AblationTest>,
}

impl Ablation {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# models\nfactor\tchannels\tpsnr\tperceptual\n");
        for m in &self.models {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                m.factor,
                m.channels,
                sig(mean(&m.psnr), 6),
                sig(mean(&m.perceptual), 6)
            );
        }
        s.push_str("# one-tailed paired t-tests, more channels vs fewer\n");
        s.push_str("more\tfewer\tpsnr_t\tpsnr_p\tperceptual_t\tperceptual_p\tdf\n");
        for t in &self.tests {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.more,
                t.fewer,
                sig(t.psnr.t, 6),
                sig(t.psnr.p, 6),
                sig(t.perceptual.t, 6),
                sig(t.perceptual.p, 6),
                t.psnr.df
            );
        }
        s
    }
}

fn compare(more: &AblationModel, fewer: &AblationModel) -> Result<AblationTest> {
    Ok(AblationTest {
        more: more.channels,
        fewer: fewer.channels,
        psnr: paired_t_test(&more.psnr, &fewer.psnr, Alternative::Greater)?,
        perceptual: paired_t_test(&more.perceptual, &fewer.perceptual, Alternative::Less)?,
    })
}

/// Trains one model per reduction factor under `out/factor_<r>` and compares
/// them on the shared test split.
pub fn ablate_channels(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Ablation> {
    let data = Dataset::load(data_dir)?;
    let mut log = start_run(cfg, out)?;
    let mut factors = cfg.evaluation.ablation_factors.clone();
    factors.sort_unstable();
    factors.dedup();
    let fovs = test_fovs(cfg, &data);
    let ext = RandomConvExtractor::new(cfg.evaluation.perceptual_seed);
    let mut models = Vec::new();
    for &factor in &factors {
        let mut sub = cfg.clone();
        sub.data.reduction_factor = factor;
        let dir = out.join(format!("factor_{factor}"));
        let trained = Trained::load(&train_run(&sub, data_dir, &dir)?)?;
        let ions: Vec<&ImageTensor> = fovs.iter().map(|(_, s)| &s.ions).collect();
        let ends = endpoints(&trained, &sub, &ions)?;
        let outs = sample_endpoints(&trained, &sub.sampling, &ends)?;
        let samples = dir.join("samples");
        let mut pairs = Vec::new();
        for ((id, s), o) in fovs.iter().zip(&outs) {
            save_stain(&samples, id, &o.image)?;
            pairs.push((id.clone(), stain_to_unit(&o.image), byte_to_unit(&s.stain)));
        }
        let metrics = par_map(&pairs, |_, (_, p, g)| evaluate_pair(p, g, &ext))?;
        let report = MetricReport::from_pairs(pairs.iter().map(|(id, ..)| id.clone()).zip(metrics).collect())?;
        write_text(&dir.join(METRICS_FILE), &report.to_tsv())?;
        let m = AblationModel {
            factor,
            channels: trained.meta.conditioner.in_channels,
            psnr: report.column("psnr").unwrap_or_default(),
            perceptual: report.column("perceptual").unwrap_or_default(),
        };
        log.line(format!(
            "factor={factor}\tchannels={}\tpsnr={}\tperceptual={}",
            m.channels,
            sig(mean(&m.psnr), 6),
            sig(mean(&m.perceptual), 6)
        ))?;
        models.push(m);
    }
    let mut tests = Vec::new();
    for w in models.windows(2) {
        tests.push(compare(&w[0], &w[1])?);
    }
    if models.len() > 2 {
        tests.push(compare(&models[0], &models[models.len() - 1])?);
    }
    let ablation = Ablation { models, tests };
    write_text(&out.join(ABLATION_FILE), &ablation.to_tsv())?;
    Ok(ablation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub exit_fraction: f64,
    pub exit_time: usize,
    pub perceptual: f64,
    pub fid_proxy: f64,
    pub niqe: f64,
    /// Every output bitwise equal to the vanilla output of the same FOV.
    pub matches_vanilla: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub steps: usize,
    pub reference_exit_fraction: f64,
    /// Vanilla first, then mean and skip over the configured exit points.
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    /// Exit time with the lowest mean perceptual distance for `strategy`.
    pub fn optimum(&self, strategy: Strategy) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.strategy == strategy)
            .min_by(|a, b| a.perceptual.total_cmp(&b.perceptual))
    }

    pub fn to_tsv(&self) -> String {
        let f = self.reference_exit_fraction;
        let mut s = format!(
            "# reference optimum: t_e = {} of 100 (t_e = {} at T = {})\n",
            sig(100.0 * f, 4),
            (f * self.steps as f64).round() as usize,
            self.steps
        );
        for strategy in [Strategy::Mean, Strategy::Skip] {
            if let Some(r) = self.optimum(strategy) {
                let _ = writeln!(
                    s,
                    "# measured optimum ({}): t_e = {} of 100 (t_e = {} at T = {})",
                    strategy.name(),
                    sig(100.0 * r.exit_fraction, 4),
                    r.exit_time,
                    self.steps
                );
            }
        }
        s.push_str("strategy\texit_fraction\texit_time\tperceptual\tfid_proxy\tniqe\tmatches_vanilla\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.strategy.name(),
                sig(r.exit_fraction, 4),
                r.exit_time,
                sig(r.perceptual, 6),
                sig(r.fid_proxy, 6),
                sig(r.niqe, 6),
                r.matches_vanilla
            );
        }
        s
    }
}

/// NIQE reference model from ground-truth training stains.
pub fn niqe_reference(cfg: &RunConfig, train: &[PairedSample]) -> Result<MvgModel> {
    let patch = cfg.evaluation.niqe_patch;
    let mut feats = Vec::new();
    for s in train {
        if feats.len() >= cfg.evaluation.niqe_fit_patches {
            break;
        }
        feats.extend(niqe_features(&byte_to_unit(&s.stain), patch)?);
    }
    feats.truncate(cfg.evaluation.niqe_fit_patches.max(ionstain::quality::MIN_FIT_PATCHES));
    niqe_fit(&feats)
}

/// Samples the test split under vanilla and under mean and skip at every
/// configured exit point.
pub fn sweep_exit(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Sweep> {
    let trained = Trained::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let fovs = test_fovs(cfg, &data);
    if fovs.len() < 2 {
        return Err(Error::InvalidArgument("the exit sweep needs at least two test FOVs".into()));
    }
    let mut log = start_run(cfg, out)?;
    let ext = RandomConvExtractor::new(cfg.evaluation.perceptual_seed);
    let niqe_model = niqe_reference(cfg, &data.train)?;
    let gts: Vec<ImageTensor> = fovs.iter().map(|(_, s)| byte_to_unit(&s.stain)).collect();
    let gt_refs: Vec<&ImageTensor> = gts.iter().collect();
    let ions: Vec<&ImageTensor> = fovs.iter().map(|(_, s)| &s.ions).collect();
    let ends = endpoints(&trained, cfg, &ions)?;

    let mut variants = vec![(Strategy::Vanilla, 0.0)];
    for strategy in [Strategy::Mean, Strategy::Skip] {
        variants.extend(cfg.evaluation.sweep_exit_fractions.iter().map(|&f| (strategy, f)));
    }
    let mut rows = Vec::new();
    let mut vanilla: Vec<ImageTensor> = Vec::new();
    for (strategy, fraction) in variants {
        let exit_time = cfg.exit_time(fraction);
        let sampling = SamplingConfig {
            strategy,
            exit_time,
            ..cfg.sampling.clone()
        };
        let outs = sample_endpoints(&trained, &sampling, &ends)?;
        let raw: Vec<ImageTensor> = outs.into_iter().map(|o| o.image).collect();
        let matches_vanilla = strategy == Strategy::Vanilla || raw == vanilla;
        let preds: Vec<ImageTensor> = raw.iter().map(stain_to_unit).collect();
        let pairs: Vec<(&ImageTensor, &ImageTensor)> = preds.iter().zip(&gts).collect();
        let perceptual = par_map(&pairs, |_, (p, g)| ionstain::quality::perceptual_distance(p, g, &ext))?;
        let niqe = par_map(&preds, |_, p| niqe_score(p, &niqe_model, cfg.evaluation.niqe_patch))?;
        let pred_refs: Vec<&ImageTensor> = preds.iter().collect();
        let row = SweepRow {
            strategy,
            exit_fraction: fraction,
            exit_time,
            perceptual: mean(&perceptual),
            fid_proxy: fid_proxy(&gt_refs, &pred_refs, &ext)?,
            niqe: mean(&niqe),
            matches_vanilla,
        };
        log.line(format!(
            "{}\tt_e={}\tperceptual={}",
            strategy.name(),
            exit_time,
            sig(row.perceptual, 6)
        ))?;
        rows.push(row);
        if strategy == Strategy::Vanilla {
            vanilla = raw;
        }
    }
    let sweep = Sweep {
        steps: trained.sched.steps(),
        reference_exit_fraction: cfg.evaluation.reference_exit_fraction,
        rows,
    };
    write_text(&out.join(SWEEP_FILE), &sweep.to_tsv())?;
    dataio::write_json(out.join("sweep.json"), &sweep)?;
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub strategy: Strategy,
    pub exit_time: usize,
    /// Mean CV over all pixels of all FOVs, per Y, Cb, Cr.
    pub ycbcr: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repeatability {
    pub repeats: usize,
    pub fovs: usize,
    pub rows: Vec<CvRow>,
}

impl Repeatability {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# repeats = {}, fovs = {}\nstrategy\texit_time\ty\tcb\tcr\n", self.repeats, self.fovs);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.strategy.name(),
                r.exit_time,
                sig(r.ycbcr[0], 6),
                sig(r.ycbcr[1], 6),
                sig(r.ycbcr[2], 6)
            );
        }
        s
    }
}

/// Repeats sampling of every test FOV under each configured strategy and
/// writes per-pixel YCbCr CV maps to `out/<strategy>/<id>.cv.vstn`.
pub fn cv(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Repeatability> {
    let trained = Trained::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let fovs = test_fovs(cfg, &data);
    let mut log = start_run(cfg, out)?;
    let ions: Vec<&ImageTensor> = fovs.iter().map(|(_, s)| &s.ions).collect();
    let ends = endpoints(&trained, cfg, &ions)?;
    let net = Network {
        model: &trained.model,
        params: &trained.params,
    };
    let exit_time = cfg.exit_time(cfg.evaluation.cv_exit_fraction);
    let mut rows = Vec::new();
    for &strategy in &cfg.evaluation.cv_strategies {
        let sampling = SamplingConfig {
            strategy,
            exit_time,
            ..cfg.sampling.clone()
        };
        let maps = par_map(&ends, |i, end| {
            let runs = repeat_from_endpoint(&net, &trained.sched, end, &fov_sampling(&sampling, i), cfg.evaluation.cv_repeats)?;
            let units: Vec<ImageTensor> = runs.iter().map(|o| stain_to_unit(&o.image)).collect();
            ycbcr_cv_map(&units.iter().collect::<Vec<_>>())
        })?;
        let dir = out.join(strategy.name());
        dataio::ensure_dir(&dir)?;
        let mut sum = [0.0; 3];
        for ((id, _), map) in fovs.iter().zip(&maps) {
            write_image(dir.join(format!("{id}.cv.vstn")), map)?;
            for (acc, v) in sum.iter_mut().zip(mean_cv(map)) {
                *acc += v;
            }
        }
        let ycbcr = sum.map(|v| v / maps.len() as f64);
        log.line(format!(
            "{}\tt_e={exit_time}\tcv={}/{}/{}",
            strategy.name(),
            sig(ycbcr[0], 6),
            sig(ycbcr[1], 6),
            sig(ycbcr[2], 6)
        ))?;
        rows.push(CvRow {
            strategy,
            exit_time,
            ycbcr,
        });
    }
    let rep = Repeatability {
        repeats: cfg.evaluation.cv_repeats,
        fovs: fovs.len(),
        rows,
    };
    write_text(&out.join(CV_FILE), &rep.to_tsv())?;
    Ok(rep)
}

/// Glomerulus-vs-rest separation of each ion channel, in units of the
/// channel's overall standard deviation, averaged over the samples. A
/// low-res pixel counts as glomerulus when most of its block is.
pub fn glomerulus_contrast(samples: &[&PairedSample]) -> Vec<f64> {
    let c = samples.first().map_or(0, |s| s.ions.channels());
    let mut score = vec![0.0; c];
    let mut used = 0usize;
    for s in samples {
        let (h, w) = (s.ions.height(), s.ions.width());
        let hw = w * DOWNSAMPLE;
        let mask: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let hits = (0..DOWNSAMPLE * DOWNSAMPLE)
                    .filter(|k| {
                        let (dy, dx) = (k / DOWNSAMPLE, k % DOWNSAMPLE);
                        s.labels[(y * DOWNSAMPLE + dy) * hw + x * DOWNSAMPLE + dx] == GLOMERULUS
                    })
                    .count();
                2 * hits > DOWNSAMPLE * DOWNSAMPLE
            })
            .collect();
        let inside = mask.iter().filter(|&&m| m).count();
        if inside == 0 || inside == mask.len() {
            continue;
        }
        used += 1;
        for (k, sc) in score.iter_mut().enumerate() {
            let v = s.ions.channel(k);
            let (mut a, mut b) = (0.0, 0.0);
            for (&x, &m) in v.iter().zip(&mask) {
                if m {
                    a += x as f64;
                } else {
                    b += x as f64;
                }
            }
            let all = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|&x| (x as f64 - all).powi(2)).sum::<f64>() / v.len() as f64;
            *sc += (a / inside as f64 - b / (mask.len() - inside) as f64) / (var.sqrt() + 1e-12);
        }
    }
    if used > 0 {
        score.iter_mut().for_each(|v| *v /= used as f64);
    }
    score
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    pub channel: usize,
    pub ion: Vec<f64>,
    pub virtual_stain: Vec<f64>,
    pub ground_truth: Vec<f64>,
}

impl SpectrumComparison {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# ion channel {}\nradius\tion\tvirtual_stain\tground_truth\n", self.channel);
        for (r, ((a, b), c)) in self.ion.iter().zip(&self.virtual_stain).zip(&self.ground_truth).enumerate() {
            let _ = writeln!(s, "{r}\t{}\t{}\t{}", sig(*a, 6), sig(*b, 6), sig(*c, 6));
        }
        s
    }
}

fn accumulate(acc: &mut Vec<f64>, v: Vec<f64>) -> Result<()> {
    if acc.is_empty() {
        *acc = v;
    } else if acc.len() != v.len() {
        return Err(Error::InvalidArgument("test FOVs differ in size".into()));
    } else {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    Ok(())
}

/// Mean radial power spectra of the most glomerulus-selective ion channel
/// (bilinearly upsampled), the virtual stain and the ground truth.
pub fn spectrum(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<SpectrumComparison> {
    let trained = Trained::load(checkpoint)?;
    let data = Dataset::load(data_dir)?;
    let fovs = test_fovs(cfg, &data);
    let mut log = start_run(cfg, out)?;
    let samples: Vec<&PairedSample> = fovs.iter().map(|(_, s)| *s).collect();
    let score = glomerulus_contrast(&samples);
    let channel = score
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidArgument("no ion channels".into()))?;
    let ions: Vec<&ImageTensor> = samples.iter().map(|s| &s.ions).collect();
    let ends = endpoints(&trained, cfg, &ions)?;
    let outs = sample_endpoints(&trained, &cfg.sampling, &ends)?;
    let (mut ion, mut vs, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    for (s, o) in samples.iter().zip(&outs) {
        let plane = s.ions.select_channels(&[channel])?;
        let up = bilinear_upsample(&plane, cfg.evaluation.spectrum_upsample)?;
        accumulate(&mut ion, radial_power_spectrum(&up)?)?;
        accumulate(&mut vs, radial_power_spectrum(&grayscale(&stain_to_unit(&o.image))?)?)?;
        accumulate(&mut gt, radial_power_spectrum(&grayscale(&byte_to_unit(&s.stain))?)?)?;
    }
    let n = samples.len() as f64;
    let norm = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
    if ion.len() != vs.len() {
        return Err(Error::InvalidArgument(format!(
            "upsampled ion image has {} radial bins, stain has {}",
            ion.len(),
            vs.len()
        )));
    }
    let cmp = SpectrumComparison {
        channel,
        ion: norm(ion),
        virtual_stain: norm(vs),
        ground_truth: norm(gt),
    };
    write_text(&out.join(SPECTRUM_FILE), &cmp.to_tsv())?;
    log.line(format!("spectrum\tchannel={channel}\tfovs={}\tbins={}", samples.len(), cmp.ion.len()))?;
    Ok(cmp)
}
