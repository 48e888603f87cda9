//! Self-supervised view-prediction pre-training and supervised fine-tuning
//! for Vision Transformers on small low-resolution datasets.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod compare;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod views;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::RngState;
pub use tensor::{Element, Tensor};
