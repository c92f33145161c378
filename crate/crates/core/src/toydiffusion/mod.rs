//! A desk-scale class-conditional diffusion substrate: data, denoiser,
//! training, samplers and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod sampler;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{Normalization, ToyDataset};
pub use model::{Block, Denoiser, ForwardCache, LayerNorm, Linear, ModelConfig};
pub use sampler::{
    ddim_step, ddim_update, ddpm_step, ddpm_update, empirical_mse_curve, forward_noise, guided_eps, sample,
    sample_with, MseCurve, SampleOutput, Sampler,
};
pub use train::{denoising_loss, train, write_loss_csv, EpochLoss, TrainConfig};
