//! Multimodal image+text fusion classifier, built on a small reverse-mode
//! autodiff core, with a synthetic paired-data generator and an ablation
//! harness comparing image-only / text-only / fused variants.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, TensorId};
