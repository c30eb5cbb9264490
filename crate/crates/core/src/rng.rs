//! Counter-based seeded randomness.
//!
//! Every random draw in the filter is addressed by `(seed, counter, stream)` so that a step can
//! be replayed exactly, independent of how many draws happened before it.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Named purposes so unrelated draws never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    PredictSigma = 1,
    ProcessNoise = 2,
    UpdateSigma = 3,
    Lookahead = 4,
    Affordance = 5,
    Vision = 6,
    Tactile = 7,
    Population = 8,
    Init = 9,
    Strategy = 10,
    Split = 11,
    StartPose = 12,
    Segment = 13,
}

/// Mixes a seed and a counter into one 64-bit state (splitmix64 finalizer).
pub fn mix(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, counter: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, counter));
    rng.set_stream(stream as u64);
    rng
}

/// `rows x cols` matrix of i.i.d. standard normal draws.
pub fn normal_matrix(seed: u64, counter: u64, stream: Stream, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = rng_for(seed, counter, stream);
    // Fill row by row so the first rows do not depend on the column count of later rows.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
