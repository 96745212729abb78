//! Bidirectional vision-Mamba classification with multi-level knowledge
//! distillation for low-resolution images.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`gradcheck`]: dense `f32` tensors, a reverse-mode
//!   tape and a finite-difference checker.
//! * [`encoder`]: the selective-scan block run over the token sequence in both
//!   directions.
//! * [`network`]: patch embedding with a middle class token, the encoder
//!   stack and the classification head.
//! * [`sr`]: bicubic resampling and the ×4 residual super-resolution front end.
//! * [`distill`]: cross-entropy, tempered logit KL and hidden-state losses.
//! * [`train`], [`checkpoint`], [`data`], [`config`]: AdamW, cosine schedule,
//!   teacher/student loops, the binary checkpoint format and datasets.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
mod kernels;
pub mod network;
pub mod params;
pub mod sr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub use kernels::SCAN_EXP_CLAMP;
