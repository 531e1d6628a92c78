//! Per-FOV metric tables as tab-separated text.

use serde::{Deserialize, Serialize};

use super::features::{stack_distance, FeatureExtractor};
use super::stats::{paired_t_test, Alternative, TTest};
use super::{contrast, fov_color_distance, mse, psnr};
use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::tensor::ImageTensor;

/// Full-reference metrics of one prediction against its ground truth,
/// both RGB in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub cie94: f64,
    pub contrast_pred: f64,
    pub contrast_gt: f64,
}

impl PairMetrics {
    pub const COLUMNS: [&'static str; 6] = ["psnr", "mse", "perceptual", "cie94", "contrast_pred", "contrast_gt"];

    pub fn values(&self) -> Vec<f64> {
        vec![self.psnr, self.mse, self.perceptual, self.cie94, self.contrast_pred, self.contrast_gt]
    }
}

pub fn evaluate_pair(pred: &ImageTensor, gt: &ImageTensor, extractor: &impl FeatureExtractor) -> Result<PairMetrics> {
    gt.ensure_same_shape(pred, "evaluate_pair")?;
    Ok(PairMetrics {
        psnr: psnr(gt, pred)?,
        mse: mse(gt, pred)?,
        perceptual: stack_distance(&extractor.extract(pred)?, &extractor.extract(gt)?)?,
        cie94: fov_color_distance(gt, pred)?,
        contrast_pred: contrast(pred)?,
        contrast_gt: contrast(gt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub name: String,
    pub result: TTest,
}

/// One row per FOV, then column means and sample standard deviations, then
/// any attached tests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    pub tests: Vec<TestRow>,
}

impl MetricReport {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            ..Self::default()
        }
    }

    /// Report over [`PairMetrics`] rows with the contrast-equivalence test
    /// attached (two-tailed, when there are at least two rows).
    pub fn from_pairs(rows: Vec<(String, PairMetrics)>) -> Result<Self> {
        let mut r = Self::new(&PairMetrics::COLUMNS);
        for (id, m) in rows {
            r.push(id, m.values())?;
        }
        if r.rows.len() >= 2 {
            let (p, g) = (r.column("contrast_pred").expect("column"), r.column("contrast_gt").expect("column"));
            r.tests.push(TestRow {
                name: "contrast_pred_vs_gt_two_tailed".into(),
                result: paired_t_test(&p, &g, Alternative::TwoSided)?,
            });
        }
        Ok(r)
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::invalid(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((id.into(), values));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.1[j]).collect())
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("fov\t{}\n", self.columns.join("\t"));
        let line = |label: &str, v: &[f64]| {
            let cells: Vec<String> = v.iter().map(|x| sig(*x, 9)).collect();
            format!("{label}\t{}\n", cells.join("\t"))
        };
        for (id, v) in &self.rows {
            s += &line(id, v);
        }
        s += "# aggregate\n";
        let n = self.rows.len() as f64;
        let means: Vec<f64> = (0..self.columns.len())
            .map(|j| self.rows.iter().map(|r| r.1[j]).sum::<f64>() / n)
            .collect();
        let stds: Vec<f64> = (0..self.columns.len())
            .map(|j| {
                let ss: f64 = self.rows.iter().map(|r| (r.1[j] - means[j]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt()
            })
            .collect();
        s += &line("mean", &means);
        s += &line("std", &stds);
        if !self.tests.is_empty() {
            s += "# tests\ntest\tt\tp\tdf\n";
            for t in &self.tests {
                s += &format!("{}\t{}\t{}\t{}\n", t.name, sig(t.result.t, 9), sig(t.result.p, 9), t.result.df);
            }
        }
        s
    }
}
