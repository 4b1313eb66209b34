//! Variational autoencoders over Gaussian primitives, trained on CPU with
//! hand-written backpropagation.
//!
//! The submanifold-field model encodes a sampled field cloud with a PointNet
//! encoder and decodes it with an implicit decoder over a canonical sphere.
//! Two parameter-space baselines encode the flat parameter vector instead.

pub mod adam;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod model;
pub mod nn;
pub mod recon;
pub mod train;

pub use error::{Result, VaeError};
pub use model::{ModelConfig, ModelKind, Reconstruction, TrainItem, VaeModel};
pub use recon::ReconConfig;
pub use train::{TrainConfig, Trainer};
