//! Rotary position embeddings, phase shift calibration and the toy
//! transformer, trainer and evaluation harnesses built on them.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod phase;
pub mod psc;
pub mod rope;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{LanguageModel, ModelConfig, ModelState, ParamFamily};
pub use numerics::{SplitMix64, Tensor};
pub use rope::{FrequencySchedule, Layout};
