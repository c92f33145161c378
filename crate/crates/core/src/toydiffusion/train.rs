//! Noise-prediction training with Adam.

use std::io::Write;
use std::ops::RangeInclusive;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::ToyDataset;
use super::model::Denoiser;
use super::sampler::{forward_noise, normal_matrix};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Probability of replacing a label with the null class.
    pub cond_dropout: f32,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, learning_rate: 2e-3, cond_dropout: 0.1, grad_clip: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Parameter(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub fn write_loss_csv<W: Write>(log: &[EpochLoss], mut out: W) -> Result<()> {
    writeln!(out, "epoch,mean_loss")?;
    for e in log {
        writeln!(out, "{},{:?}", e.epoch, e.mean_loss)?;
    }
    Ok(())
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
    lr: f32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize, lr: f32) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr }
    }

    fn apply(&mut self, model: &mut Denoiser, grads: &[f32]) {
        self.step += 1;
        let c1 = 1.0 - Self::B1.powi(self.step);
        let c2 = 1.0 - Self::B2.powi(self.step);
        let mut off = 0;
        let (m, v, lr) = (&mut self.m, &mut self.v, self.lr);
        model.visit_mut(|_, w, _| {
            for (k, p) in w.iter_mut().enumerate() {
                let i = off + k;
                let g = grads[i];
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g * g;
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
            off += w.len();
        });
    }
}

fn flatten(model: &Denoiser) -> Vec<f32> {
    let mut out = Vec::with_capacity(model.parameter_count());
    model.visit(|_, w, _| out.extend_from_slice(w));
    out
}

/// Mean squared noise-prediction error and its gradient with respect to the
/// network output.
fn loss_and_grad(pred: ArrayView2<f32>, eps: ArrayView2<f32>) -> (f64, Array2<f32>) {
    let n = pred.len() as f32;
    let diff = &pred - &eps;
    let loss = diff.iter().map(|&d| f64::from(d) * f64::from(d)).sum::<f64>() / f64::from(n);
    (loss, diff.mapv(|d| 2.0 * d / n))
}

/// Trains in place and returns the per-epoch mean loss. Each epoch visits the
/// dataset once in a shuffled order; timesteps are uniform over `1..=T`.
pub fn train(model: &mut Denoiser, data: &ToyDataset, schedule: &NoiseSchedule, config: &TrainConfig) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pixels = model.config().pixels();
    if data.images.ncols() != pixels {
        return Err(crate::error::shape_err(format!("{pixels} pixels"), data.images.ncols()));
    }
    let null = model.config().null_class();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.parameter_count(), config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x0 = data.images.select(Axis(0), chunk);
            let t: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=schedule.horizon())).collect();
            let classes: Vec<usize> = chunk
                .iter()
                .map(|&i| if rng.random::<f32>() < config.cond_dropout { null } else { data.labels[i] })
                .collect();
            let eps = normal_matrix(chunk.len(), pixels, &mut rng);
            let xt = forward_noise(x0.view(), &t, eps.view(), schedule)?;
            let (pred, cache) = model.forward_cached(xt.view(), &t, &classes)?;
            let (loss, d_out) = loss_and_grad(pred.view(), eps.view());
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            let mut grads = flatten(&model.backward(&cache, d_out.view()));
            if config.grad_clip > 0.0 {
                let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::TrainingDiverged { step, loss: norm });
                }
                if norm > f64::from(config.grad_clip) {
                    let k = (f64::from(config.grad_clip) / norm) as f32;
                    grads.iter_mut().for_each(|g| *g *= k);
                }
            }
            adam.apply(model, &grads);
            total += loss;
            batches += 1;
            step += 1;
        }
        log.push(EpochLoss { epoch, mean_loss: total / batches as f64 });
    }
    Ok(log)
}

/// Held-out noise-prediction loss with conditional labels and timesteps drawn
/// uniformly from `t_range`.
pub fn denoising_loss(
    model: &Denoiser,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    t_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if t_range.is_empty() || *t_range.start() == 0 || *t_range.end() > schedule.horizon() {
        return Err(Error::Parameter(format!("timestep range {t_range:?} invalid for T = {}", schedule.horizon())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = model.config().pixels();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(256) {
        let x0 = data.images.select(Axis(0), chunk);
        let t: Vec<usize> = chunk.iter().map(|_| rng.random_range(t_range.clone())).collect();
        let classes: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let eps = normal_matrix(chunk.len(), pixels, &mut rng);
        let xt = forward_noise(x0.view(), &t, eps.view(), schedule)?;
        let pred = model.forward(xt.view(), &t, &classes)?;
        let (loss, _) = loss_and_grad(pred.view(), eps.view());
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleFamily;
    use crate::toydiffusion::data::Normalization;
    use crate::toydiffusion::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig { d_model: 16, heads: 2, blocks: 1, ..ModelConfig::default() }
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Denoiser::init(small(), &mut rng).unwrap();
        let before = flatten(&model);
        let data = ToyDataset::generate(16, 8, 0, None).unwrap();
        let s = NoiseSchedule::with_defaults(ScheduleFamily::Linear);
        let log = train(&mut model, &data, &s, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert!(log.is_empty());
        assert_eq!(flatten(&model), before);
    }

    #[test]
    fn training_is_seeded() {
        let data = ToyDataset::generate(64, 8, 0, None).unwrap();
        let s = NoiseSchedule::with_defaults(ScheduleFamily::Linear);
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 5, ..TrainConfig::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut model = Denoiser::init(small(), &mut rng).unwrap();
            let log = train(&mut model, &data, &s, &cfg).unwrap();
            (flatten(&model), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_zero_data_loss_decreases() {
        // All-zero images normalize to zero, so x_t = √(1 − ᾱ_t) ε and the
        // network only has to learn a per-timestep rescaling.
        let mut data = ToyDataset::generate(256, 8, 0, Some(Normalization { mean: 0.0, std: 1.0 })).unwrap();
        data.images.fill(0.0);
        let s = NoiseSchedule::with_defaults(ScheduleFamily::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = Denoiser::init(small(), &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 10, batch_size: 32, seed: 3, ..TrainConfig::default() };
        let log = train(&mut model, &data, &s, &cfg).unwrap();
        for w in log.windows(2) {
            assert!(w[1].mean_loss < w[0].mean_loss, "{log:?}");
        }
        assert!(log[9].mean_loss < 0.2 * log[0].mean_loss, "{log:?}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Denoiser::init(small(), &mut rng).unwrap();
        model.head.bias[0] = f32::NAN;
        let data = ToyDataset::generate(16, 8, 0, None).unwrap();
        let s = NoiseSchedule::with_defaults(ScheduleFamily::Linear);
        let err = train(&mut model, &data, &s, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { step: 0, .. }));
    }

    #[test]
    fn loss_csv_format() {
        let mut buf = Vec::new();
        write_loss_csv(&[EpochLoss { epoch: 0, mean_loss: 0.5 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss\n0,0.5\n");
    }
}
