//! Deterministic, counter-keyed random streams.
//!
//! Every Gaussian draw in the engine comes from a ChaCha8 stream selected by
//! a `(seed, stream)` pair, read sequentially in element order. Two callers
//! that ask for the same pair get the same draws, regardless of what else
//! ran before them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seed used throughout the engine.
pub type Seed = u64;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a labelled sub-task (run index, sample index, ...).
pub fn derive_seed(base: Seed, tag: u64) -> Seed {
    mix64(base ^ mix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Generator for stream `stream` under `seed`.
pub fn stream_rng(seed: Seed, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills `out` with standard normal draws from stream `(seed, stream)`;
/// element `i` of `out` always receives the `i`-th draw of the stream.
pub fn fill_normal(seed: Seed, stream: u64, out: &mut [f32]) {
    let mut rng = stream_rng(seed, stream);
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z as f32;
    }
}

/// Standard normal draws as `f64`.
pub fn normal_vec_f64(seed: Seed, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}
