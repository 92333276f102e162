//! Real NVP density models over windowed multivariate telemetry, augmented
//! with a permutation-prediction self-supervised task, for fault detection.
//!
//! The crate covers the full pipeline: a small reverse-mode autodiff engine
//! ([`diffcore`]), affine-coupling flows ([`flow`]), permutation-set design
//! and the self-supervised head ([`selfsup`]), loss assembly with a pluggable
//! physics penalty ([`losses`]), telemetry ingestion/windowing plus a
//! synthetic EPS generator ([`data`], [`synth`]), threshold-free detection
//! metrics ([`metrics`]), and the training/evaluation harness ([`train`]).

pub mod data;
pub mod diffcore;
pub mod error;
pub mod flow;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod selfsup;
pub mod synth;
pub mod train;

pub use diffcore::{DenseArray, ParamNode, Tape};
pub use error::{Error, Result};
