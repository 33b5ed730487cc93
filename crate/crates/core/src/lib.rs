//! Manifold key representations for vision-transformer self-attention.
//!
//! The crate is self-contained: a dense tensor type with reverse-mode
//! autodiff ([`tensor`], [`graph`]), the attention key variants
//! ([`attention`]), a compact ViT ([`model`]), desk-scale training
//! ([`train`]) and analytic cost accounting plus attention rollout
//! ([`analysis`]).

// `!(x >= 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use attention::{GammaInit, KeyKind, KeyVariantSpec};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{ModelConfig, VitModel};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
