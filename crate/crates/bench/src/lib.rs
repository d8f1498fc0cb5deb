//! Fixtures shared by the benchmarks.

use pfa_core::synth::{synth_image, SynthConfig, SynthImage};
use pfa_core::{PixelGrid, ProbabilityMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A synthetic scene of the given size with the default class count and noise.
pub fn scene(height: usize, width: usize, seed: u64) -> SynthImage {
    synth_image(&SynthConfig { height, width, ..Default::default() }, seed).expect("valid synth config")
}

pub fn random_probs(grid: PixelGrid, num_classes: usize, seed: u64) -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..grid.len() * num_classes).map(|_| rng.random_range(0.01..1.0)).collect();
    ProbabilityMap::new(grid, num_classes, v).expect("positive entries")
}
