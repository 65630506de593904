//! Procedural image classification data.
//!
//! Class `k` of `K` is a grating of soft bars at orientation `k·π/K` with a
//! random phase, frequency and colour, plus a bright blob at a random
//! position and Gaussian pixel noise. Classes are interleaved so any prefix
//! of length `K·m` is balanced.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            num_classes: 4,
            samples_per_class: 16,
            image_size: 56,
            channels: 3,
            noise_std: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    /// `(N, C, S, S)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        let DatasetConfig {
            seed,
            num_classes: k,
            samples_per_class,
            image_size: size,
            channels,
            noise_std,
        } = config;
        if k == 0 || samples_per_class == 0 || size == 0 || channels == 0 {
            return Err(Error::Config(format!("empty dataset: {config:?}")));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be finite and >= 0, got {noise_std}")));
        }
        let n = k * samples_per_class;
        let plane = size * size;
        let mut data = vec![0.0; n * channels * plane];
        let mut labels = Vec::with_capacity(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let s = size as f64;
        for (i, img) in data.chunks_mut(channels * plane).enumerate() {
            let label = i % k;
            labels.push(label);
            let theta = label as f64 * PI / k as f64 + rng.random_range(-0.05..0.05);
            let (ct, st) = (theta.cos(), theta.sin());
            let freq = rng.random_range(3.0..5.0) / s;
            let phase = rng.random_range(0.0..2.0 * PI);
            let (by, bx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let radius = rng.random_range(0.08..0.15) * s;
            let colour: Vec<f64> = (0..channels).map(|_| rng.random_range(0.5..1.0)).collect();
            for (c, ch) in img.chunks_mut(plane).enumerate() {
                for (p, v) in ch.iter_mut().enumerate() {
                    let (y, x) = ((p / size) as f64, (p % size) as f64);
                    let bars = (3.0 * (2.0 * PI * freq * (x * ct + y * st) + phase).sin()).tanh();
                    let d2 = (y - by).powi(2) + (x - bx).powi(2);
                    let blob = 0.5 * (-d2 / (2.0 * radius * radius)).exp();
                    let eps = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    *v = colour[c] * bars + blob + eps;
                }
            }
        }
        Ok(SyntheticDataset {
            config,
            images: Tensor::new(vec![n, channels, size, size], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.numel() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Precondition(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, labels))
    }
}
