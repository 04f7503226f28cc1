//! Dual-margin penalization for long-tailed, open-set classification.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below fix the precision.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod priors;
pub mod sampler;
pub mod scalar;
pub mod synthdata;
pub mod trainer;
pub mod verify;

pub use encoder::{init_params, Activation, EncoderParams};
pub use error::{Error, Result};
pub use eval::{closed_set_metrics, EvalReport, MetricsRow, OpenSetMetrics, ScoreKind};
pub use linalg::Matrix;
pub use loss::{dual_margin_loss, LossMode, MarginConfig, MarginSign, PrototypeBank};
pub use priors::{partition_classes, ClassPartition, ClassStats, Group, PriorSource};
pub use sampler::{EmbeddingBatch, SamplerConfig, SelectionStrategy};
pub use scalar::Scalar;
pub use synthdata::{Dataset, Decay, Split, SyntheticSpec};
pub use trainer::{train, Model, TrainConfig, TrainOutcome};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type MarginConfig64 = MarginConfig<f64>;
pub type MarginConfig32 = MarginConfig<f32>;
pub type ClassStats64 = ClassStats<f64>;
pub type ClassStats32 = ClassStats<f32>;
pub type EncoderParams64 = EncoderParams<f64>;
pub type EncoderParams32 = EncoderParams<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Dataset32 = Dataset<f32>;
pub type TrainConfig64 = TrainConfig<f64>;
pub type TrainConfig32 = TrainConfig<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
