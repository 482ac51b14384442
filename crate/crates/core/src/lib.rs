//! Quasi-silence anchored speaker diarization.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clustering;
pub mod divergence;
pub mod error;
pub mod federated;
pub mod frontend;
pub mod identifier;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod segmentation;
pub mod silence;
pub mod synth;

pub use error::{Error, Result, Stage, StageExt};
