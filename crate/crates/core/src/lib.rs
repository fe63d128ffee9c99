//! Physics-guided denoising diffusion for diffusion-weighted MRI synthesis.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume_io`]: DVOL containers, FSL gradient tables, normalisation and padding.
//! * [`physics`]: ADC atlas estimation, base noise schedules, per-voxel schedule maps
//!   and the forward noising process.
//! * [`autograd`]: a small reverse-mode differentiation tape used by the networks.
//! * [`conditioning`], [`denoiser`], [`adapter`]: the guidance mapping, the hourglass
//!   neighbourhood-attention backbone and the tract-atlas adapter.
//! * [`engine`]: training, ancestral sampling and checkpoints.
//! * [`phantom`]: tensor-model phantoms standing in for acquired data.
//! * [`metrics`], [`config`], [`cli`]: evaluation and the command-line surface.

pub mod adapter;
pub mod autograd;
pub mod cli;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod engine;
mod error;
pub mod metrics;
pub mod params;
pub mod phantom;
pub mod physics;
pub mod volume_io;

pub use error::{Error, Result};
