//! Image-only and image+text calorie regressors built on a small
//! reverse-mode autograd engine, with the data pipeline, training loop and
//! paired statistical comparison used to evaluate them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Gradients, ParamId, Tape, Var};
pub use error::{Error, Result};
pub use experiment::{run_experiment, RunOutcome};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use model::{build_multimodal, build_unimodal, ArchConfig, Model, ModelKind, OutputScale};
pub use stats::{compare, evaluate, paired_t_test, report, Comparison, EvalReport, PredictionSet, TTestResult};
pub use tensor::{Padding, Precision, Scalar, Tensor};
pub use train::{train, TrainConfig, TrainLog, TrainState};
