//! Resolution-adaptive image classifiers.
//!
//! A [`model::Model`] owns one meta-learner per convolution that maps an
//! encoding of the input resolution to that convolution's kernel, a bank of
//! batch-norm sets (one per training resolution) and a classifier shared by
//! every resolution. Training sums the cross-entropy over all training
//! resolutions and adds a KL term that distills each resolution's prediction
//! into every smaller one. At test time the model is parameterized for an
//! arbitrary resolution in one of three ways (see [`inference`]).

pub mod bn;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod meta;
pub mod model;
pub mod network;
pub mod report;
mod ops;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ops::{log_softmax, softmax};
