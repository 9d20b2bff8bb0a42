//! Efficient bottom-up pose estimation toolkit.
//!
//! The crate covers the whole design loop of a single-branch pose network:
//! architecture description ([`archspec`]), analytic parameter/MAC counting
//! ([`costmodel`]), the block-count algebra used to shrink multi-branch
//! networks ([`shrink`]), weight-sharing sub-network extraction
//! ([`supernet`]) and constraint-aware evolutionary search ([`nas`]), a
//! reference forward pass with an instrumented MAC counter ([`engine`]),
//! and keypoint decoding plus OKS/AP evaluation ([`decode`], [`eval`]).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the
//! common instantiations.

pub mod archspec;
pub mod cli;
pub mod costmodel;
pub mod decode;
pub mod engine;
pub mod error;
pub mod eval;
pub mod nas;
pub mod rng;
pub mod scalar;
pub mod shrink;
pub mod supernet;
pub mod synth;

pub use archspec::{ArchConfig, BlockKind, BlockSpec, MultiBranchConfig, Preset};
pub use costmodel::{CostReport, LayerCost};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use shrink::ShrinkConfig;
pub use supernet::{SearchSpace, SubnetChoice};

/// Inference tensors use 32-bit floats.
pub type Tensor = engine::Tensor<f32>;
pub type WeightStore = supernet::WeightStore<f32>;
pub type KeypointSet = decode::KeypointSet<f32>;
pub type Detection = decode::Detection<f32>;
/// Evaluation runs in double precision.
pub type OksParams = eval::OksParams<f64>;
pub type Person = eval::Person<f64>;
