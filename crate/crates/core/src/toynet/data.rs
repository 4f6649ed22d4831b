use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ToyError;

pub const IMAGE_SIDE: usize = 8;

/// Knobs for the synthetic blob task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Target ratio between the distance of the closest pair of class means and
    /// the per-pixel noise standard deviation. Around 2-3 the classes overlap
    /// enough that network capacity shows up in test accuracy.
    pub margin: f64,
    /// Width of the Gaussian blob marking each class, in pixels.
    pub blob_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise: 1.0,
            margin: 2.5,
            blob_sigma: 1.2,
        }
    }
}

/// Class-conditional Gaussian-blob images, `1 x 8 x 8`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub shape: (usize, usize, usize),
    pub seed: u64,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Mean image of every class.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let dim = self.shape.0 * self.shape.1 * self.shape.2;
        let mut sums = vec![vec![0.0; dim]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(x) {
                *s += v;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        sums
    }
}

/// Noise-free image of class `c`: a blob placed on a ring around the centre.
pub fn class_pattern(c: usize, classes: usize, blob_sigma: f64) -> Vec<f64> {
    let mid = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let angle = std::f64::consts::TAU * c as f64 / classes as f64;
    let (cy, cx) = (mid + 2.5 * angle.sin(), mid + 2.5 * angle.cos());
    let mut img = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            img.push((-d2 / (2.0 * blob_sigma * blob_sigma)).exp());
        }
    }
    img
}

pub fn synth_dataset(seed: u64, n: usize, classes: usize) -> Result<SynthDataset, ToyError> {
    synth_dataset_with(seed, n, classes, &SynthParams::default())
}

pub fn synth_dataset_with(seed: u64, n: usize, classes: usize, params: &SynthParams) -> Result<SynthDataset, ToyError> {
    if classes < 2 || n < classes {
        return Err(ToyError::InvalidParams(format!(
            "need n >= classes >= 2, got n={n}, classes={classes}"
        )));
    }
    if !(params.noise > 0.0 && params.margin > 0.0 && params.blob_sigma > 0.0) {
        return Err(ToyError::InvalidParams(format!(
            "synthetic parameters must be positive: {params:?}"
        )));
    }
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|c| class_pattern(c, classes, params.blob_sigma))
        .collect();
    let mut closest = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d: f64 = patterns[a].iter().zip(&patterns[b]).map(|(x, y)| (x - y).powi(2)).sum();
            closest = closest.min(d.sqrt());
        }
    }
    // 20% headroom so the margin also holds for sample estimates
    let amplitude = 1.2 * params.margin * params.noise / closest;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, params.noise).expect("noise is positive");
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        inputs.push(
            patterns[y]
                .iter()
                .map(|p| amplitude * p + normal.sample(&mut rng))
                .collect(),
        );
        labels.push(y);
    }
    Ok(SynthDataset {
        inputs,
        labels,
        classes,
        shape: (1, IMAGE_SIDE, IMAGE_SIDE),
        seed,
    })
}
