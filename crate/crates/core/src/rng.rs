//! Seeded, independent random streams.
//!
//! Every noise source owns its own ChaCha stream derived from the scenario
//! seed and a fixed stream id, so adding or reordering draws in one sensor
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Stream ids. Values are part of the determinism contract; do not renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Lidar = 1,
    Gps = 2,
    Imu = 3,
    Detector = 4,
    DownLink = 5,
    UpLink = 6,
    Slip = 7,
    Mppi = 8,
}

pub fn stream(seed: u64, id: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

/// A stream keyed by an arbitrary (seed, stream, word) triple; used for
/// per-call, per-rollout noise in the planner.
pub fn keyed(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Zero-mean Gaussian sample; `sigma == 0` returns exactly zero without
/// consuming randomness.
pub fn gaussian<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
}
