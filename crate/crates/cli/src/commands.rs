//! The plumbing verbs: synth, train, sample, eval, schedule.

use std::path::{Path, PathBuf};

use ionstain::dataio::{self, Ppm};
use ionstain::fmt::sig;
use ionstain::phantom::{generate_dataset, Dataset, MANIFEST_FILE};
use ionstain::quality::{
    evaluate_pair, fid, ycbcr_histograms, FeatureExtractor, FeatureGaussian, MetricReport, RandomConvExtractor,
};
use ionstain::sampling::{save_stain, SampleOutput};
use ionstain::schedule::{BridgeSchedule, StepPlan};
use ionstain::tensor::ValueRange;
use ionstain::{Error, ImageTensor, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{fov_sampling, par_map, start_run, test_fovs, train_run, write_text, Trained};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const HISTOGRAM_FILE: &str = "histograms.tsv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SCHEDULE_FILE: &str = "schedule.tsv";
pub const ENDPOINT_DIR: &str = "endpoints";

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(&cfg.data.phantom, cfg.data.train_samples, cfg.data.test_samples, out)?;
    let mut log = start_run(cfg, out)?;
    log.line(format!(
        "synth\tentries={}\tchannels={}\tsize={}x{}",
        manifest.entries.len(),
        cfg.data.phantom.channels,
        cfg.data.phantom.height,
        cfg.data.phantom.width
    ))
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<PathBuf> {
    train_run(cfg, data, out)
}

/// Bridge endpoints of the given FOVs, in order.
pub fn endpoints(trained: &Trained, cfg: &RunConfig, ions: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
    par_map(ions, |_, x| trained.endpoint(cfg, x))
}

/// One sample per endpoint with per-FOV seeds.
pub fn sample_endpoints(
    trained: &Trained,
    base: &ionstain::sampling::SamplingConfig,
    ends: &[ImageTensor],
) -> Result<Vec<SampleOutput>> {
    par_map(ends, |i, x| trained.sample(x, &fov_sampling(base, i)))
}

/// Samples every test FOV into `out/<id>.{ppm,vstn}`; the conditioner-only
/// endpoints go to `out/endpoints`.
pub fn sample(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let trained = Trained::load(checkpoint)?;
    cfg.sampling.validate(&trained.sched)?;
    let data = Dataset::load(data)?;
    let fovs = test_fovs(cfg, &data);
    let mut log = start_run(cfg, out)?;
    let ions: Vec<&ImageTensor> = fovs.iter().map(|(_, s)| &s.ions).collect();
    let ends = endpoints(&trained, cfg, &ions)?;
    let outs = sample_endpoints(&trained, &cfg.sampling, &ends)?;
    for (((id, _), end), o) in fovs.iter().zip(&ends).zip(&outs) {
        save_stain(out, id, &o.image)?;
        save_stain(out.join(ENDPOINT_DIR), id, end)?;
        log.line(format!("{id}\tcalls={}\tdraws={}", o.denoiser_calls, o.draws))?;
    }
    Ok(())
}

/// 8-bit RGB to `[0, 1]`.
pub fn byte_to_unit(img: &ImageTensor) -> ImageTensor {
    img.map(|v| v / 255.0).with_range(ValueRange::UNIT)
}

fn read_ppm_unit(path: &Path) -> Result<ImageTensor> {
    Ok(byte_to_unit(&Ppm::read(path)?.to_image()))
}

/// Ground truth by FOV id: the test split of a dataset directory, or every
/// `*.ppm` of a plain directory in name order.
pub fn load_ground_truth(cfg: &RunConfig, gt: &Path) -> Result<Vec<(String, ImageTensor)>> {
    if gt.join(MANIFEST_FILE).exists() {
        let data = Dataset::load(gt)?;
        return Ok(test_fovs(cfg, &data)
            .into_iter()
            .map(|(id, s)| (id, byte_to_unit(&s.stain)))
            .collect());
    }
    let entries = std::fs::read_dir(gt).map_err(|e| crate::pipeline::io_err(gt, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if cfg.evaluation.max_fovs > 0 {
        paths.truncate(cfg.evaluation.max_fovs);
    }
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no ground truth images in {}", gt.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, read_ppm_unit(p)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub fovs: usize,
    pub psnr: f64,
    pub perceptual: f64,
    pub cie94: f64,
    /// Absent with fewer than two FOVs.
    pub fid_proxy: Option<f64>,
    pub contrast_p: Option<f64>,
}

/// Pooled random-conv features of each image.
pub fn pooled_features(imgs: &[&ImageTensor], ext: &RandomConvExtractor) -> Result<Vec<Vec<f64>>> {
    par_map(imgs, |_, img| Ok(ext.extract(img)?.pooled()))
}

/// FID proxy between two image sets.
pub fn fid_proxy(real: &[&ImageTensor], generated: &[&ImageTensor], ext: &RandomConvExtractor) -> Result<f64> {
    let a = FeatureGaussian::fit(&pooled_features(real, ext)?)?;
    let b = FeatureGaussian::fit(&pooled_features(generated, ext)?)?;
    fid(&a, &b)
}

fn histogram_tsv(pred: &[&ImageTensor], gt: &[&ImageTensor], bins: usize) -> Result<String> {
    let hp = ycbcr_histograms(pred, bins)?;
    let hg = ycbcr_histograms(gt, bins)?;
    let mut s = String::from("bin\tpred_y\tpred_cb\tpred_cr\tgt_y\tgt_cb\tgt_cr\n");
    for b in 0..bins {
        s.push_str(&b.to_string());
        for h in hp.iter().chain(&hg) {
            s.push_str(&format!("\t{}", h.counts[b]));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Compares `pred/<id>.ppm` with the ground truth of every id.
pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<EvalSummary> {
    let truth = load_ground_truth(cfg, gt)?;
    let preds: Vec<ImageTensor> = truth
        .iter()
        .map(|(id, _)| read_ppm_unit(&pred.join(format!("{id}.ppm"))))
        .collect::<Result<_>>()?;
    let mut log = start_run(cfg, out)?;
    let ext = RandomConvExtractor::new(cfg.evaluation.perceptual_seed);
    let pairs: Vec<(&ImageTensor, &ImageTensor)> = preds.iter().zip(truth.iter().map(|(_, g)| g)).collect();
    let metrics = par_map(&pairs, |_, (p, g)| evaluate_pair(p, g, &ext))?;
    let report = MetricReport::from_pairs(truth.iter().map(|(id, _)| id.clone()).zip(metrics).collect())?;
    write_text(&out.join(METRICS_FILE), &report.to_tsv())?;

    let p_refs: Vec<&ImageTensor> = preds.iter().collect();
    let g_refs: Vec<&ImageTensor> = truth.iter().map(|(_, g)| g).collect();
    write_text(&out.join(HISTOGRAM_FILE), &histogram_tsv(&p_refs, &g_refs, cfg.evaluation.histogram_bins)?)?;
    let fid_proxy = if truth.len() >= 2 {
        Some(fid_proxy(&g_refs, &p_refs, &ext)?)
    } else {
        None
    };
    let mean = |c: &str| report.mean(c).unwrap_or(f64::NAN);
    let summary = EvalSummary {
        fovs: truth.len(),
        psnr: mean("psnr"),
        perceptual: mean("perceptual"),
        cie94: mean("cie94"),
        fid_proxy,
        contrast_p: report.tests.first().map(|t| t.result.p),
    };
    dataio::write_json(out.join(SUMMARY_FILE), &summary)?;
    log.line(format!(
        "eval\tfovs={}\tpsnr={}\tperceptual={}",
        summary.fovs,
        sig(summary.psnr, 6),
        sig(summary.perceptual, 6)
    ))?;
    Ok(summary)
}

/// Posterior variance along the configured sampling plan.
pub fn schedule(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sched = BridgeSchedule::from_config(&cfg.schedule)?;
    let plan = StepPlan::new(sched.steps(), cfg.sampling.steps)?;
    let mut log = start_run(cfg, out)?;
    write_text(&out.join(SCHEDULE_FILE), &sched.variance_curve(&plan)?.to_tsv())?;
    log.line(format!("schedule\tT={}\tsteps={}", sched.steps(), plan.times().len()))
}
