//! Gaussian splatting primitives viewed as radiance fields on ellipsoidal
//! submanifolds: parameterization, spherical-harmonic colors, field sampling
//! and recovery, field equivalence, and the Manifold Distance.

pub mod datagen;
pub mod error;
pub mod manifold;
pub mod mdist;
pub mod primitives;
pub mod rng;
pub mod sgrf;
pub mod sh;

pub use error::{Error, Result};
pub use manifold::{recover_params, sample_field, sample_params, FieldCloud, FieldPoint, SamplingConfig, SamplingScheme};
pub use mdist::{mdist, GroundMetricConfig};
pub use primitives::{activate, ActivatedGaussian, GaussianParams, Quat};
pub use sh::ShCoeffs;
