//! Desk-scale conditional DDPM used as the gradient source.
//!
//! Data points live directly in latent space. The denoiser is a small MLP
//! whose flat parameter vector has a fixed documented ordering (see
//! [`model::ModelShape`]), so per-sample loss gradients can be compressed and
//! cached like those of a large model.

pub mod data;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use data::{gen_clusters, ClusterSpec, DataPoint};
pub use model::{Denoiser, ModelShape, Real};
pub use sample::sample_ddpm;
pub use schedule::{forward_noise, ForwardNoise, Schedule};
pub use train::{train, TrainConfig, TrainOutcome};
