//! Conditional-GAN engine built around a fusion discriminator, with a
//! self-contained autodiff tensor core, spectrally normalized building
//! blocks, a U-Net generator, an ablation zoo of conditioning strategies,
//! synthetic structured-prediction tasks, and numerical verification of the
//! activation-fusion inequalities that motivate the architecture.

pub mod analysis;
pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod layers;
pub mod netpbm;
pub mod objective;
pub mod report;
pub mod rng;
pub mod taskgen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dims, Tensor};
