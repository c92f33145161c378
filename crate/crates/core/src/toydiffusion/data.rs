//! Procedural two-class blob images.
//!
//! Class 0 places a Gaussian blob near the top-left corner, class 1 near the
//! bottom-right. Amplitude, width and a small center jitter are random. Images
//! are normalized with dataset-wide mean and standard deviation.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Array2<f32>,
    pub labels: Vec<usize>,
    pub normalization: Normalization,
    pub image_size: usize,
}

fn blob<R: Rng>(size: usize, class: usize, rng: &mut R) -> Vec<f32> {
    let s = size as f32;
    let base = if class == 0 { 0.25 * s } else { 0.75 * s } - 0.5;
    let ci = base + rng.random_range(-0.5..0.5);
    let cj = base + rng.random_range(-0.5..0.5);
    let amp: f32 = rng.random_range(0.5..1.5);
    let width: f32 = rng.random_range(0.1..0.2) * s;
    (0..size * size)
        .map(|p| {
            let (i, j) = ((p / size) as f32, (p % size) as f32);
            let r2 = (i - ci).powi(2) + (j - cj).powi(2);
            amp * (-r2 / (2.0 * width * width)).exp()
        })
        .collect()
}

impl ToyDataset {
    /// `n` images with alternating labels. When `normalization` is `None` the
    /// statistics are measured on this sample.
    pub fn generate(n: usize, image_size: usize, seed: u64, normalization: Option<Normalization>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = image_size * image_size;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut raw = Vec::with_capacity(n * pixels);
        for &c in &labels {
            raw.extend(blob(image_size, c, &mut rng));
        }
        let norm = normalization.unwrap_or_else(|| {
            let len = raw.len() as f64;
            let mean = raw.iter().map(|&v| f64::from(v)).sum::<f64>() / len;
            let var = raw.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / len;
            Normalization { mean: mean as f32, std: var.sqrt().max(1e-12) as f32 }
        });
        raw.iter_mut().for_each(|v| *v = (*v - norm.mean) / norm.std);
        let images = Array2::from_shape_vec((n, pixels), raw).expect("sized buffer");
        Ok(Self { images, labels, normalization: norm, image_size })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f32> {
        self.images.row(i)
    }
}
