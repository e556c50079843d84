//! Desk-scale laboratory for denoising diffusion models: noise schedules,
//! DDPM/DDIM sampling, deterministic latent embedding, attribute-filtered
//! dataset statistics and linear trajectory editing in latent space.
//!
//! Everything runs on plain `f64` buffers with explicit seeding, so each
//! algorithm can be exercised end to end against analytic oracles without
//! large-scale training.

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod config;
pub mod error;
pub mod imageops;
pub mod manifest;
pub mod rng;
pub mod sample;
pub mod schedule;
pub mod tensor_io;
pub mod trajectory;

pub use denoiser::{DenoiserModel, GaussianMixture, MlpArch, MlpParams, TrainConfig};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use sample::Sample;
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind, ScheduleSpec};
