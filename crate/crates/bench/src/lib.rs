//! Deterministic inputs shared by the benchmarks.

use chanprune_core::featio::AveragedMaps;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `channels` averaged maps of `dim` values: `groups` noisy bundles around random
/// directions, so clustering has real structure to find.
pub fn bundled_maps(channels: usize, dim: usize, groups: usize, seed: u64) -> AveragedMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..groups.max(1))
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let channels = (0..channels)
        .map(|i| {
            let scale = rng.random_range(0.5..2.0);
            centres[i % centres.len()]
                .iter()
                .map(|c| scale * (c + rng.random_range(-0.05..0.05)))
                .collect()
        })
        .collect();
    AveragedMaps {
        layer_name: "bench".into(),
        channels,
    }
}
