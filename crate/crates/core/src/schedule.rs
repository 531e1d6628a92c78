//! Closed-form Brownian-bridge mathematics over a discrete time axis.
//!
//! The bridge runs from the stain image `x0` (t = 0) to the conditioner
//! endpoint `xT` (t = T). The mean coefficient is linear, `m_t = t/T`, and
//! the marginal variance is `delta_t = 2 s m_t (1 - m_t)`, so both ends are
//! pinned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig;
use crate::rng::{fill_normal, Seed};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSchedule {
    steps: usize,
    scale: f64,
    m: Vec<f64>,
    delta: Vec<f64>,
}

/// Coefficients of `x_t = a x_{t'} + b x_T + sqrt(sigma) eta` for `t' < t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

/// Posterior `q(x_{t'} | x_t, x0, xT)` written as an affine combination
/// `coef_x x_t + coef_x0 x0 + coef_xt xT` plus variance `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    pub coef_x: f64,
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub var: f64,
}

impl PosteriorParams {
    /// True when the posterior is a point mass on the `x0` estimate.
    pub fn is_point_mass_on_x0(&self) -> bool {
        self.coef_x0 == 1.0 && self.coef_x == 0.0 && self.coef_xt == 0.0 && self.var == 0.0
    }
}

/// Persistable schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            scale: 1.0,
        }
    }
}

impl BridgeSchedule {
    pub fn new(steps: usize, scale: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("step count {steps} < 2")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("variance scale {scale} must be > 0")));
        }
        let m: Vec<f64> = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        let delta = m.iter().map(|&mt| 2.0 * scale * mt * (1.0 - mt)).collect();
        Ok(Self {
            steps,
            scale,
            m,
            delta,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.steps, cfg.scale)
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            scale: self.scale,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn m(&self, t: usize) -> f64 {
        self.m[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn m_all(&self) -> &[f64] {
        &self.m
    }

    pub fn delta_all(&self) -> &[f64] {
        &self.delta
    }

    fn check_pair(&self, t: usize, t_prev: usize) -> Result<()> {
        if t_prev >= t || t > self.steps {
            return Err(Error::invalid(format!(
                "need 0 <= t_prev < t <= {}, got t={t}, t_prev={t_prev}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn transition(&self, t: usize, t_prev: usize) -> Result<TransitionParams> {
        self.check_pair(t, t_prev)?;
        let (mt, mp) = (self.m[t], self.m[t_prev]);
        if t == self.steps {
            return Ok(TransitionParams {
                a: 0.0,
                b: 1.0,
                sigma: 0.0,
            });
        }
        let a = (1.0 - mt) / (1.0 - mp);
        let b = mt - a * mp;
        // delta_t - a^2 delta_{t'} in factored form, which is exactly >= 0.
        let sigma = 2.0 * self.scale * (1.0 - mt) * (mt - mp) / (1.0 - mp);
        Ok(TransitionParams { a, b, sigma })
    }

    pub fn posterior(&self, t: usize, t_prev: usize) -> Result<PosteriorParams> {
        let tr = self.transition(t, t_prev)?;
        let d_prev = self.delta[t_prev];
        let m_prev = self.m[t_prev];
        if d_prev == 0.0 {
            return Ok(PosteriorParams {
                coef_x: 0.0,
                coef_x0: 1.0,
                coef_xt: 0.0,
                var: 0.0,
            });
        }
        if tr.sigma == 0.0 && tr.a == 0.0 {
            return Ok(PosteriorParams {
                coef_x: 0.0,
                coef_x0: 1.0 - m_prev,
                coef_xt: m_prev,
                var: d_prev,
            });
        }
        let d_t = self.delta[t];
        let var = (tr.sigma * d_prev / d_t).clamp(0.0, d_prev);
        let coef_x = tr.a * d_prev / d_t;
        let coef_xt = var * (m_prev / d_prev) - coef_x * tr.b;
        let coef_x0 = 1.0 - coef_x - coef_xt;
        Ok(PosteriorParams {
            coef_x,
            coef_x0,
            coef_xt,
            var,
        })
    }

    /// Draws `x_t` from the forward marginal. Noise comes from stream `t`
    /// of `noise_seed`.
    pub fn sample_forward(
        &self,
        x0: &ImageTensor,
        xt_end: &ImageTensor,
        t: usize,
        noise_seed: Seed,
    ) -> Result<ImageTensor> {
        x0.ensure_same_shape(xt_end, "sample_forward")?;
        if t > self.steps {
            return Err(Error::invalid(format!("t={t} > T={}", self.steps)));
        }
        if t == 0 {
            return Ok(x0.clone());
        }
        if t == self.steps {
            return Ok(xt_end.clone().with_range(x0.range));
        }
        let mut eps = vec![0f32; x0.len()];
        fill_normal(noise_seed, t as u64, &mut eps);
        let (mt, sd) = (self.m[t], self.delta[t].sqrt());
        let mut out = x0.clone();
        for ((o, &e), &y) in out.data_mut().iter_mut().zip(&eps).zip(xt_end.data()) {
            *o = ((1.0 - mt) * *o as f64 + mt * y as f64 + sd * e as f64) as f32;
        }
        Ok(out)
    }

    /// Posterior variance for every consecutive pair of `plan`.
    pub fn variance_curve(&self, plan: &StepPlan) -> Result<VarianceCurve> {
        if plan.times.first() != Some(&self.steps) {
            return Err(Error::invalid("plan does not start at T"));
        }
        let rows = plan
            .pairs()
            .map(|(t, tp)| Ok((t, tp, self.posterior(t, tp)?.var)))
            .collect::<Result<Vec<_>>>()?;
        Ok(VarianceCurve { rows })
    }
}

/// Strictly decreasing list of times from `T` down to 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    times: Vec<usize>,
}

impl StepPlan {
    /// Evenly rounded plan with `count` strides: the de-duplicated
    /// `round(k T / count)` for `k = count..=0`, rounding halves up.
    pub fn new(steps: usize, count: usize) -> Result<Self> {
        if count < 2 || count > steps + 1 {
            return Err(Error::invalid(format!(
                "inference step count {count} outside [2, {}]",
                steps + 1
            )));
        }
        let mut times: Vec<usize> = Vec::with_capacity(count + 1);
        for k in (0..=count).rev() {
            let t = (2 * k * steps + count) / (2 * count);
            if times.last() != Some(&t) {
                times.push(t);
            }
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    /// Consecutive `(t, t_prev)` pairs in sampling order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceCurve {
    /// `(t, t_prev, delta_tilde)` per reverse step.
    pub rows: Vec<(usize, usize, f64)>,
}

impl VarianceCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("t\tdelta_tilde\n");
        for &(t, _, v) in &self.rows {
            s.push_str(&format!("{t}\t{}\n", sig(v, 9)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_endpoints_and_midpoint() {
        let s = BridgeSchedule::new(1000, 1.0).unwrap();
        assert_eq!((s.m(0), s.delta(0)), (0.0, 0.0));
        assert_eq!((s.m(1000), s.delta(1000)), (1.0, 0.0));
        assert_eq!(s.m(500), 0.5);
        assert_eq!(s.delta(500), 0.5);
        assert!(s.m_all().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn build_rejects_bad_args() {
        assert!(matches!(BridgeSchedule::new(1, 1.0), Err(Error::InvalidArgument(_))));
        assert!(BridgeSchedule::new(10, 0.0).is_err());
        assert!(BridgeSchedule::new(10, -1.0).is_err());
        assert!(BridgeSchedule::new(10, f64::NAN).is_err());
    }

    #[test]
    fn transition_examples() {
        let s = BridgeSchedule::new(1000, 1.0).unwrap();
        let tr = s.transition(1000, 999).unwrap();
        assert_eq!((tr.a, tr.b, tr.sigma), (0.0, 1.0, 0.0));
        let tr = s.transition(2, 1).unwrap();
        let expect = 2.0 * (1.0 - 0.002) * 0.001 / (1.0 - 0.001);
        assert!((tr.sigma - expect).abs() < 1e-15);
        assert!((tr.sigma - 0.001998).abs() < 1e-6);
        assert!(s.transition(1, 1).is_err());
        assert!(s.transition(1001, 3).is_err());
    }

    #[test]
    fn posterior_degenerate_cases() {
        let s = BridgeSchedule::new(1000, 1.0).unwrap();
        let p = s.posterior(1000, 999).unwrap();
        assert_eq!(p.coef_x, 0.0);
        assert_eq!(p.coef_x0, 1.0 - s.m(999));
        assert_eq!(p.coef_xt, s.m(999));
        assert_eq!(p.var, s.delta(999));
        let p = s.posterior(1, 0).unwrap();
        assert!(p.is_point_mass_on_x0());
        let p = s.posterior(1000, 0).unwrap();
        assert!(p.is_point_mass_on_x0());
    }

    #[test]
    fn step_plan_rounding() {
        assert_eq!(StepPlan::new(10, 5).unwrap().times(), &[10, 8, 6, 4, 2, 0]);
        assert_eq!(StepPlan::new(10, 2).unwrap().times(), &[10, 5, 0]);
        let full = StepPlan::new(1000, 1000).unwrap();
        assert_eq!(full.len(), 1001);
        assert!(full.times().iter().rev().copied().eq(0..=1000));
        // Duplicates collapse when the plan is denser than the axis.
        let dense = StepPlan::new(10, 11).unwrap();
        assert_eq!(dense.times(), &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert!(StepPlan::new(10, 1).is_err());
        assert!(StepPlan::new(10, 12).is_err());
    }

    #[test]
    fn forward_endpoints_are_exact() {
        let s = BridgeSchedule::new(50, 1.0).unwrap();
        let x0 = ImageTensor::from_fn(2, 3, 3, |c, y, x| (c + y * x) as f32 * 0.1 - 0.3);
        let xt = ImageTensor::from_fn(2, 3, 3, |c, y, x| (c * 7 + y + x) as f32 * 0.05);
        for seed in [0, 1, 99] {
            assert_eq!(s.sample_forward(&x0, &xt, 0, seed).unwrap().data(), x0.data());
            assert_eq!(s.sample_forward(&x0, &xt, 50, seed).unwrap().data(), xt.data());
        }
        let bad = ImageTensor::filled(1, 3, 3, 0.0);
        assert!(s.sample_forward(&x0, &bad, 3, 0).is_err());
    }

    #[test]
    fn variance_curve_rows() {
        let s = BridgeSchedule::new(200, 1.0).unwrap();
        let plan = StepPlan::new(200, 50).unwrap();
        let curve = s.variance_curve(&plan).unwrap();
        assert_eq!(curve.rows.len(), plan.len() - 1);
        let first = curve.rows[0];
        assert_eq!(first.2, s.delta(first.1));
        assert_eq!(curve.rows.last().unwrap().2, 0.0);
        let tsv = curve.to_tsv();
        assert!(tsv.starts_with("t\tdelta_tilde\n200\t"));
        assert_eq!(tsv.lines().count(), plan.len());
    }
}
