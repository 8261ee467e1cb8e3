//! Bipartite graph reasoning GAN for pose-guided person image generation.
//!
//! The crate contains a small reverse-mode tensor engine ([`autodiff`]), the
//! generator building blocks ([`graph_blocks`], [`interaction`]), the full
//! generator and discriminators ([`model`]), the training objective
//! ([`objectives`]), a synthetic stick-figure dataset ([`data`]), evaluation
//! metrics ([`metrics`]) and the training loop ([`train`]).
//!
//! All numeric code is generic over [`Scalar`]; training uses `f32` and the
//! gradient checks use `f64`.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph_blocks;
pub mod interaction;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
