//! Seeded random streams.
//!
//! Every stochastic choice in the crate (weight init, scene layout, noise,
//! data order) draws from a ChaCha8 stream keyed by a seed and a stream tag,
//! so independent consumers never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

/// Name of the only generator family currently supported in configs.
pub const GENERATOR: &str = "chacha8";

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, tag)`.
pub fn stream(seed: u64, tag: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Uniform values in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in(rng: &mut DetRng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Standard normal sample via Box-Muller.
pub fn normal(rng: &mut DetRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
