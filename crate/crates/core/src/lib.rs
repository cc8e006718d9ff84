//! Gated N-to-N conditional GAN for synthesizing missing channels of
//! co-registered multi-channel image stacks.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod gating;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod training;

pub use error::{Error, Result};
