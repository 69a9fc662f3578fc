//! Action-conditional environment models, latent rollouts and
//! imagination-augmented agents on small pixel environments.

pub mod agent;
pub mod blocks;
pub mod envs;
pub mod error;
pub mod harness;
pub mod models;
pub mod rollout;

pub use error::{Error, Result};
