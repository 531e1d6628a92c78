//! Reverse sampling with an exact denoiser, and the relations between
//! strategies.

use ionstain::model::{ConditionerConfig, DenoiserConfig, StainModel};
use ionstain::rng::normal_vec_f64;
use ionstain::sampling::{
    repeat_from_endpoint, reverse_step, sample, sample_from_endpoint, Denoiser, Network, SamplingConfig, Strategy,
};
use ionstain::schedule::{BridgeSchedule, StepPlan};
use ionstain::{ImageTensor, Result, ValueRange};
use proptest::prelude::*;

/// Returns `x_t − x0` for a known `x0`.
struct Exact(ImageTensor);

impl Denoiser for Exact {
    fn denoise(&self, x_t: &ImageTensor, _: &ImageTensor, _: usize, _: usize) -> Result<ImageTensor> {
        let data = x_t.data().iter().zip(self.0.data()).map(|(a, b)| a - b).collect();
        ImageTensor::new(x_t.channels(), x_t.height(), x_t.width(), data, ValueRange::UNBOUNDED)
    }
}

fn image(c: usize, h: usize, w: usize, seed: u64, scale: f64) -> ImageTensor {
    let v = normal_vec_f64(seed, 0, c * h * w)
        .into_iter()
        .map(|z| (scale * z).clamp(-0.95, 0.95) as f32)
        .collect();
    ImageTensor::new(c, h, w, v, ValueRange::UNBOUNDED).unwrap()
}

#[test]
fn exact_denoiser_reproduces_forward_marginals() {
    let sched = BridgeSchedule::new(12, 1.0).unwrap();
    let plan = StepPlan::new(12, 5).unwrap();
    let (x0, end) = (0.3f64, -0.4f64);
    let n = 64;
    let den = Exact(ImageTensor::filled(1, 1, n, x0 as f32));
    let x_end = ImageTensor::filled(1, 1, n, end as f32);
    let runs = 2000;
    let mut stats = vec![(0f64, 0f64); plan.times().len()];
    for r in 0..runs {
        let mut x = x_end.clone();
        for (i, (t, tp)) in plan.pairs().enumerate() {
            x = reverse_step(&den, &sched, &x, &x_end, t, tp, Some(5000 + r)).unwrap().x_prev;
            for &v in x.data() {
                stats[i + 1].0 += v as f64;
                stats[i + 1].1 += (v as f64).powi(2);
            }
        }
    }
    let total = (runs as usize * n) as f64;
    for (i, &t) in plan.times().iter().enumerate().skip(1) {
        let m = sched.m(t);
        let (want_mean, want_var) = ((1.0 - m) * x0 + m * end, sched.delta(t));
        let mean = stats[i].0 / total;
        let var = stats[i].1 / total - mean * mean;
        if want_var == 0.0 {
            assert!((mean - x0).abs() < 1e-6 && var < 1e-10, "t={t}");
            continue;
        }
        let se = (want_var / total).sqrt();
        assert!((mean - want_mean).abs() < 4.0 * se, "t={t}: mean {mean} vs {want_mean}");
        // variance of a normal sample variance is 2σ⁴/n
        let se_var = want_var * (2.0 / total).sqrt();
        assert!((var - want_var).abs() < 4.0 * se_var, "t={t}: var {var} vs {want_var}");
    }
}

fn setup() -> (BridgeSchedule, Exact, ImageTensor) {
    (BridgeSchedule::new(30, 1.0).unwrap(), Exact(image(3, 4, 4, 1, 0.5)), image(3, 4, 4, 2, 0.5))
}

fn cfg(strategy: Strategy, exit_time: usize, seed: u64) -> SamplingConfig {
    SamplingConfig {
        strategy,
        exit_time,
        steps: 10,
        seed,
        ..SamplingConfig::default()
    }
}

#[test]
fn exact_denoiser_recovers_the_target() {
    let (sched, den, end) = setup();
    for s in [Strategy::Vanilla, Strategy::Mean, Strategy::Skip, Strategy::Average] {
        let out = sample_from_endpoint(&den, &sched, &end, &cfg(s, 12, 3)).unwrap();
        for (a, b) in out.image.data().iter().zip(den.0.data()) {
            assert!((a - b).abs() < 1e-5, "{s:?}");
        }
    }
}

#[test]
fn mean_with_zero_exit_is_vanilla() {
    let (sched, _, end) = setup();
    // a denoiser that lags the truth, so noise actually matters
    let den = Exact(image(3, 4, 4, 9, 0.2));
    let biased = |x: &ImageTensor| x.map(|v| 0.5 * v);
    struct Lagged<'a, F: Fn(&ImageTensor) -> ImageTensor>(&'a Exact, F);
    impl<F: Fn(&ImageTensor) -> ImageTensor> Denoiser for Lagged<'_, F> {
        fn denoise(&self, x: &ImageTensor, e: &ImageTensor, t: usize, s: usize) -> Result<ImageTensor> {
            Ok((self.1)(&self.0.denoise(x, e, t, s)?))
        }
    }
    let lag = Lagged(&den, biased);
    let a = sample_from_endpoint(&lag, &sched, &end, &cfg(Strategy::Vanilla, 0, 4)).unwrap();
    let b = sample_from_endpoint(&lag, &sched, &end, &cfg(Strategy::Mean, 0, 4)).unwrap();
    assert_eq!(a, b);
    let c = sample_from_endpoint(&lag, &sched, &end, &cfg(Strategy::Vanilla, 0, 5)).unwrap();
    assert_ne!(a.image, c.image);

    // full-length mean sampling is deterministic
    let m1 = sample_from_endpoint(&lag, &sched, &end, &cfg(Strategy::Mean, 30, 4)).unwrap();
    let m2 = sample_from_endpoint(&lag, &sched, &end, &cfg(Strategy::Mean, 30, 99)).unwrap();
    assert_eq!(m1.image, m2.image);
    assert_eq!(m1.draws, 0);

    let s0 = sample_from_endpoint(&lag, &sched, &end, &cfg(Strategy::Skip, 0, 4)).unwrap();
    assert_eq!(s0, a);
}

#[test]
fn skip_at_the_endpoint_is_one_call() {
    let (sched, den, end) = setup();
    let out = sample_from_endpoint(&den, &sched, &end, &cfg(Strategy::Skip, 30, 1)).unwrap();
    assert_eq!((out.denoiser_calls, out.draws), (1, 0));
    let full = sample_from_endpoint(&den, &sched, &end, &cfg(Strategy::Vanilla, 0, 1)).unwrap();
    assert_eq!(full.denoiser_calls, 10);
    assert_eq!(full.draws, 9 * end.len());
}

#[test]
fn averaging_costs_k_runs() {
    let (sched, den, end) = setup();
    let c = SamplingConfig {
        runs: 3,
        ..cfg(Strategy::Average, 0, 7)
    };
    let out = sample_from_endpoint(&den, &sched, &end, &c).unwrap();
    assert_eq!(out.denoiser_calls, 30);
    assert_eq!(out.draws, 27 * end.len());
}

#[test]
fn repeats_use_distinct_seeds() {
    let sched = BridgeSchedule::new(30, 1.0).unwrap();
    let end = image(3, 8, 8, 2, 0.5);
    let model = StainModel::new(
        &ConditionerConfig {
            in_channels: 2,
            hidden_channels: 4,
            upsample_factor: 4,
            out_channels: 3,
            stages: vec![2, 2],
        },
        &DenoiserConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![],
            time_embedding_dim: 8,
            res_blocks: 1,
            groups: 2,
        },
    )
    .unwrap();
    let params = model.init_params(0);
    let net = Network {
        model: &model,
        params: &params,
    };
    let c = cfg(Strategy::Vanilla, 0, 11);
    let reps = repeat_from_endpoint(&net, &sched, &end, &c, 3).unwrap();
    assert_eq!(reps, repeat_from_endpoint(&net, &sched, &end, &c, 3).unwrap());
    assert_ne!(reps[0].image, reps[1].image);
    assert!(repeat_from_endpoint(&net, &sched, &end, &c, 1).is_err());

    let ions = image(2, 2, 2, 3, 1.0);
    let s = sample(&model, &params, &sched, &ions, &c).unwrap();
    assert_eq!(s.image.shape(), (3, 8, 8));
    assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn suppressed_noise_is_a_subset(exit in 0usize..=30, steps in 2usize..=31, seed in 0u64..1000) {
        let (sched, den, end) = setup();
        let c = |s| SamplingConfig { steps, ..cfg(s, exit, seed) };
        let v = sample_from_endpoint(&den, &sched, &end, &c(Strategy::Vanilla)).unwrap();
        let m = sample_from_endpoint(&den, &sched, &end, &c(Strategy::Mean)).unwrap();
        let k = sample_from_endpoint(&den, &sched, &end, &c(Strategy::Skip)).unwrap();
        prop_assert!(m.draws <= v.draws && k.draws <= v.draws);
        prop_assert_eq!(m.denoiser_calls, v.denoiser_calls);
        prop_assert!(k.denoiser_calls <= v.denoiser_calls && k.denoiser_calls >= 1);
        prop_assert_eq!(v.draws % end.len(), 0);
    }
}
