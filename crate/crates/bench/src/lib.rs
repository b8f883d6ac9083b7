//! Fixed inputs shared by the benchmarks.

use csts_core::audio::AudioTrack;
use csts_core::gradsuite::random_batch;
use csts_core::{ModelConfig, Sample, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], &mut rng(seed))
}

/// Five seconds of a 1 kHz tone in light noise at 16 kHz.
pub fn tone(seconds: f64) -> AudioTrack {
    let sr = 16_000u32;
    let n = (seconds * sr as f64) as usize;
    let mut state = 0x2545_f491_u64;
    let samples = (0..n)
        .map(|i| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let noise = (state % 2001) as f64 / 1000.0 - 1.0;
            0.5 * (std::f64::consts::TAU * 1000.0 * i as f64 / sr as f64).sin() + 0.02 * noise
        })
        .collect();
    AudioTrack::new(samples, sr).expect("positive rate")
}

pub fn desk_batch(n: usize) -> (ModelConfig, Vec<Sample>) {
    let cfg = ModelConfig::desk();
    let batch = random_batch(&cfg, n, 7).expect("desk batch");
    (cfg, batch)
}
