//! Attention-based encoder-decoder for four-class eye segmentation
//! (background, sclera, iris, pupil), with its own tensor and
//! reverse-mode autodiff engine, training loop, metrics and mask clean-up.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod postproc;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use data::{AugmentConfig, Sample};
pub use error::{Error, Result};
pub use label::{LabelMap, NUM_CLASSES};
pub use loss::{LossBreakdown, LossConfig};
pub use metrics::{ConfusionMatrix, Evaluator, MetricReport};
pub use network::{ForwardOutputs, NetworkSpec, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Dims, Real, Tensor4};
pub use train::{TrainConfig, TrainState, Trainer};
