//! Conditional denoising diffusion over coefficient vectors.

mod model;
mod sample;
mod schedule;
mod unet;

pub use model::{
    epsilon_loss, metrics_csv, train, Denoiser, DiffusionConfig, DiffusionModel, TrainConfig,
    TrainSet, ZeroDenoiser,
};
pub use sample::{sample, sample_batch, sample_chains, Chain};
pub use schedule::{sinusoidal_embed, NoiseSchedule, ScheduleConfig};
pub use unet::{AdapterMode, UNetConfig};
