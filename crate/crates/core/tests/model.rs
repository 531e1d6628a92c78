//! Model contracts: init, shapes, a direct-convolution oracle for the
//! conditioner, flip equivariance and gradient linearity.

use ionstain::model::{predict_x0, ConditionerConfig, DenoiserConfig, StainModel};
use ionstain::nn::{Dims, Parameters, Tape};
use ionstain::rng::normal_vec_f64;
use ionstain::{ImageTensor, ValueRange};
use proptest::prelude::*;

fn toy_cond(in_channels: usize) -> ConditionerConfig {
    ConditionerConfig {
        in_channels,
        hidden_channels: 4,
        upsample_factor: 4,
        out_channels: 3,
        stages: vec![2, 2],
    }
}

fn toy_den(attention: Vec<usize>) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        attention_levels: attention,
        time_embedding_dim: 8,
        res_blocks: 1,
        groups: 2,
    }
}

fn noise_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
    let v = normal_vec_f64(seed, 0, c * h * w).into_iter().map(|x| x as f32).collect();
    ImageTensor::new(c, h, w, v, ValueRange::UNBOUNDED).unwrap()
}

fn randomize(p: &mut Parameters, seed: u64) {
    for (i, e) in p.entries_mut().iter_mut().enumerate() {
        let z = normal_vec_f64(seed, i as u64, e.data.len());
        e.data.iter_mut().zip(z).for_each(|(d, z)| *d = 0.3 * z as f32);
    }
}

#[test]
fn init_is_deterministic_and_denoiser_starts_at_zero() {
    let m = StainModel::new(&toy_cond(3), &toy_den(vec![1])).unwrap();
    let p = m.init_params(9);
    assert_eq!(p, m.init_params(9));
    assert_ne!(p, m.init_params(10));
    let x = noise_image(3, 8, 8, 1);
    let d = m.denoiser_forward(&p, &x, &x.map(|v| -v), 17, 200).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
    assert_eq!(predict_x0(&x, &d).unwrap(), x.map(|v| v.clamp(-1.0, 1.0)).with_range(ValueRange::STAIN));
}

#[test]
fn parameter_count_matches_hand_count() {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let norm = |c: usize| 2 * c;
    let dense = |cin: usize, cout: usize| cin * cout + cout;
    let e = 8;
    let res = |cin: usize, cout: usize| {
        norm(cin)
            + conv(cin, cout, 3)
            + dense(e, cout)
            + norm(cout)
            + conv(cout, cout, 3)
            + if cin != cout { conv(cin, cout, 1) } else { 0 }
    };
    let attn = |c: usize| norm(c) + 4 * conv(c, c, 1);
    let conditioner = conv(3, 4, 1) + conv(4, 16, 3) + conv(4, 12, 3);
    let time = 2 * dense(e, e);
    let down = conv(6, 4, 3) + res(4, 4) + conv(4, 8, 3) + res(8, 8) + attn(8);
    let mid = res(8, 8) + attn(8) + res(8, 8);
    let up = res(16, 8) + attn(8) + conv(8, 4, 3) + res(8, 4);
    let out = norm(4) + conv(4, 3, 3);
    let expect = conditioner + time + down + mid + up + out;
    assert_eq!(expect, 9735);
    let m = StainModel::new(&toy_cond(3), &toy_den(vec![1])).unwrap();
    assert_eq!(m.init_params(0).numel(), expect);
}

#[test]
fn conditioner_shape_and_zero_input() {
    let cfg = ConditionerConfig {
        in_channels: 5,
        hidden_channels: 6,
        ..ConditionerConfig::default()
    };
    let m = StainModel::new(&cfg, &toy_den(vec![])).unwrap();
    let p = m.init_params(4);
    let out = m.conditioner_forward(&p, &noise_image(5, 16, 16, 2)).unwrap();
    assert_eq!(out.shape(), (3, 160, 160));
    let zero = m.conditioner_forward(&p, &ImageTensor::zeros(5, 16, 16, ValueRange::UNBOUNDED)).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(m.conditioner_forward(&p, &noise_image(4, 16, 16, 2)).is_err());
}

// Direct evaluation of the conditioner from its weights.

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Zero-padded "same" convolution, weights [cout][cin][k][k].
fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f32], b: &[f32], k: usize) -> Vec<f64> {
    let cout = b.len();
    let pad = (k / 2) as isize;
    let mut out = vec![0f64; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[o] as f64;
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wv = wt[((o * cin + i) * k + ky) * k + kx] as f64;
                            s += wv * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// out[c][y·r + i][x·r + j] = in[c·r² + i·r + j][y][x]
fn naive_shuffle(x: &[f64], cin: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0f64; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ch * r * r + (y % r) * r + xx % r;
                out[(ch * oh + y) * ow + xx] = x[(src * h + y / r) * w + xx / r];
            }
        }
    }
    out
}

#[test]
fn conditioner_matches_direct_convolution() {
    let cfg = toy_cond(3);
    let m = StainModel::new(&cfg, &toy_den(vec![])).unwrap();
    let mut p = m.init_params(1);
    randomize(&mut p, 77);
    let ions = noise_image(3, 4, 4, 5);
    let got = m.conditioner_forward(&p, &ions).unwrap();

    let g = |n: &str| &p.get(n).unwrap().data;
    let x: Vec<f64> = ions.data().iter().map(|&v| v as f64).collect();
    let mut h = naive_conv(&x, 3, 4, 4, g("cond.embed.weight"), g("cond.embed.bias"), 1);
    h.iter_mut().for_each(|v| *v = silu(*v));
    h = naive_conv(&h, 4, 4, 4, g("cond.up0.weight"), g("cond.up0.bias"), 3);
    h = naive_shuffle(&h, 16, 4, 4, 2);
    h.iter_mut().for_each(|v| *v = silu(*v));
    h = naive_conv(&h, 4, 8, 8, g("cond.up1.weight"), g("cond.up1.bias"), 3);
    h = naive_shuffle(&h, 12, 8, 8, 2);

    assert_eq!(got.shape(), (3, 16, 16));
    for (a, b) in got.data().iter().zip(&h) {
        assert!((*a as f64 - b).abs() < 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

fn flip(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    ImageTensor::from_fn(img.channels(), img.height(), w, |c, y, x| img.get(c, y, w - 1 - x))
}

#[test]
fn denoiser_is_flip_equivariant_with_symmetric_kernels() {
    let m = StainModel::new(&toy_cond(3), &toy_den(vec![])).unwrap();
    let mut p = m.init_params(3);
    randomize(&mut p, 8);
    for e in p.entries_mut() {
        if e.name.ends_with(".bias") || e.name.ends_with(".beta") {
            e.data.iter_mut().for_each(|v| *v = 0.0);
        }
        if e.shape.len() == 4 && e.shape[3] > 1 {
            let k = e.shape[3];
            for row in e.data.chunks_mut(k) {
                for j in 0..k / 2 {
                    row[k - 1 - j] = row[j];
                }
            }
        }
    }
    let (a, b) = (noise_image(3, 8, 8, 20), noise_image(3, 8, 8, 21));
    let d = m.denoiser_forward(&p, &a, &b, 40, 200).unwrap();
    let df = m.denoiser_forward(&p, &flip(&a), &flip(&b), 40, 200).unwrap();
    assert!(d.data().iter().any(|&v| v.abs() > 1e-3));
    for (x, y) in flip(&d).data().iter().zip(df.data()) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn predict_x0_cases() {
    let x = ImageTensor::filled(1, 1, 3, 2.0);
    assert_eq!(predict_x0(&x, &ImageTensor::filled(1, 1, 3, 0.5)).unwrap().data(), &[1.0; 3]);
    assert_eq!(predict_x0(&x, &x).unwrap().data(), &[0.0; 3]);
    assert!(predict_x0(&x, &ImageTensor::filled(1, 3, 1, 0.0)).is_err());
}

#[test]
fn gradients_are_linear_in_the_output_gradient() {
    let m = StainModel::new(&toy_cond(3), &toy_den(vec![1])).unwrap();
    let mut params = m.init_params(2);
    randomize(&mut params, 4);
    let p = params.values::<f64>();
    let mut tape = Tape::<f64>::new();
    let dims = Dims::new(3, 8, 8);
    let xv = noise_image(3, 8, 8, 30).data().iter().map(|&v| v as f64).collect();
    let x = tape.input(dims, xv);
    let end = tape.input(dims, vec![0.25; dims.len()]);
    let d = m.denoiser_on(&mut tape, &p, x, end, 5, 10).unwrap();

    let zero = tape.backward(d, &vec![0.0; dims.len()], p.len()).unwrap();
    for slot in zero.slots.iter().flatten() {
        assert!(slot.iter().all(|&g| g == 0.0));
    }
    let go: Vec<f64> = normal_vec_f64(6, 0, dims.len());
    let grads = tape.backward(d, &go, p.len()).unwrap();
    let bias = params.index_of("den.out.bias").unwrap();
    let gb = grads.slots[bias].as_ref().unwrap();
    for c in 0..3 {
        let s: f64 = go[c * 64..(c + 1) * 64].iter().sum();
        assert!((gb[c] - s).abs() < 1e-12);
    }
    assert!(grads.slots.iter().flatten().flatten().all(|g| g.is_finite()));
    assert!(Tape::<f64>::new().backward(d, &go, p.len()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn conditioner_scales_any_grid(h in 1usize..6, w in 1usize..6) {
        let m = StainModel::new(&toy_cond(2), &toy_den(vec![])).unwrap();
        let p = m.init_params(0);
        let out = m.conditioner_forward(&p, &noise_image(2, h, w, 1)).unwrap();
        prop_assert_eq!(out.shape(), (3, 4 * h, 4 * w));
    }
}
