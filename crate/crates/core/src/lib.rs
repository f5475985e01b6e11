//! Speculative decoding engine built around a CTC-trained draft module.
//!
//! A small decoder-only transformer (the base model) is accelerated by a
//! single-layer attention draft module trained with a sequence-level CTC
//! objective. Each decoding step drafts several tokens in parallel, collapses
//! blanks and repeats, verifies the surviving candidates in one masked
//! forward pass of the base model, and commits the longest accepted prefix
//! plus one bonus token from the base model itself. Greedy output is
//! token-identical to plain autoregressive decoding by construction.
//!
//! The numeric core is generic over the scalar type: f32 is the working
//! precision, f64 backs the gradient-check and oracle suites.

pub mod bench;
pub mod config;
pub mod ctc;
pub mod decode;
pub mod distill;
pub mod error;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{GradMap, Tape, Var};
pub use tensor::{ParamStore, Tensor};

/// Working precision of training and inference.
pub type Tensor32 = Tensor<f32>;
/// Double precision, used by gradient checks and oracle-equivalence suites.
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
