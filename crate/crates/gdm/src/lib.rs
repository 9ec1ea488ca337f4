//! Graph diffusion for AeBS placement and GU association: the deployment
//! graph and its reward, discrete diffusion, the denoiser, reward training
//! and the test-time alternation with SCA beamforming.

pub mod baselines;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod orchestrator;
pub mod seeds;
pub mod trainer;

pub use error::{Error, Result};
