//! Decoupled proxy alignment for a tiny multimodal language model.
//!
//! The crate trains a desk-scale vision-language model (a frozen linear vision
//! stub, a two-layer GeLU connector, and a decoder-only transformer) on
//! synthetic corpora whose captions can be written in a register that matches
//! or conflicts with the language model's own prior. On top of that it provides
//! proxy-LM construction with LoRA, contrastive token reweighting, the staged
//! training recipes, and the diagnostics used to compare them.
//!
//! All numeric code is generic over [`Real`]; the aliases below fix the two
//! precisions used in practice.

pub mod analysis;
pub mod cmo;
pub mod config;
pub mod error;
pub mod gradcore;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor32 = gradcore::Tensor<f32>;
pub type Tensor64 = gradcore::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = pipeline::checkpoint::Checkpoint<f32>;
