//! Quantization-aware training toolkit.
//!
//! The crate provides a small reverse-mode autodiff engine, symmetric integer
//! quantization, a family of QAT weight operators (straight-through fake
//! quantization, pseudo-quantization noise with norm-derived scales, learnable
//! scales, variational noise), a toy encoder-decoder transformer to train them
//! on, and post-training evaluation at several precisions.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod seq2seq;
pub mod tensor;
pub mod train;

pub use autodiff::{Axis, GradStore, Tape, Var};
pub use config::{EvalConfig, ExperimentConfig};
pub use error::{Error, Result};
pub use eval::{EvalPrecision, Precision, PrecisionAssignment, ReportRow};
pub use qat::{OutlierMethod, QatConfig, QatMethod};
pub use quant::{Granularity, QuantSpec, QuantizedTensor, ScaleSet};
pub use seq2seq::{Batch, Dataset, Model, ModelConfig, QatPlan, TaskSpec};
pub use tensor::Tensor;
pub use train::{Checkpoint, TrainConfig};
