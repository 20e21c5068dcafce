//! Simulation-to-reconstruction toolkit for accelerated 3D multi-parametric
//! quantitative MRI.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common concrete types.

pub mod acquisition;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod fft;
pub mod io;
pub mod linalg;
pub mod lorein;
pub mod maps;
pub mod neural_fields;
pub mod phantom;
pub mod scalar;
pub mod signal;
pub mod subspace;

pub use error::{Error, Result};
pub use maps::{MapKind, ParametricMaps};
pub use scalar::Scalar;

pub type GroundTruth64 = phantom::GroundTruth<f64>;
pub type GroundTruth32 = phantom::GroundTruth<f32>;
pub type CoilMaps64 = phantom::CoilMaps<f64>;
pub type CoilMaps32 = phantom::CoilMaps<f32>;
pub type WeightedImages64 = signal::WeightedImages<f64>;
pub type WeightedImages32 = signal::WeightedImages<f32>;
pub type KSpaceData64 = acquisition::KSpaceData<f64>;
pub type KSpaceData32 = acquisition::KSpaceData<f32>;
pub type TemporalBasis64 = subspace::TemporalBasis<f64>;
pub type TemporalBasis32 = subspace::TemporalBasis<f32>;
