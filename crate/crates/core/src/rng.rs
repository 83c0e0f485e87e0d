//! Seeded random streams. Every random quantity in the engine derives from a
//! `(seed, stream)` pair so runs are reproducible and substreams independent.

use ndarray::{Array, Array1, Array2, Dimension, ShapeBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;

/// Stream ids reserved for fixed model parameters; per-layer noise uses the layer index.
pub mod streams {
    pub const BACKGROUND_NOISE: u64 = 0;
    pub const DENOISER_WEIGHTS: u64 = 1 << 32;
    pub const CODEC_WEIGHTS: u64 = (1 << 32) + 1;
    pub const TEXT_ENCODER: u64 = (1 << 32) + 2;
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal<T: Real, D: Dimension, Sh: ShapeBuilder<Dim = D>>(
    rng: &mut ChaCha8Rng,
    shape: Sh,
    std: f64,
) -> Array<T, D> {
    Array::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Gaussian matrix scaled by `1/√rows`, so projections roughly preserve norm.
pub fn projection<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    normal(rng, (rows, cols), 1.0 / (rows as f64).sqrt())
}

pub fn vector<T: Real>(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<T> {
    normal(rng, len, std)
}
