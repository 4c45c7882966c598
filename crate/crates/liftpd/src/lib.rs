//! Label-efficient freezing-of-gait detection from a single triaxial
//! accelerometer.
//!
//! The pipeline: parse Daphnet-style recordings, balance classes with
//! differential-hop windowing, pretrain a 1D CNN encoder by masked signal
//! reconstruction, fine-tune a frozen-encoder classifier head, evaluate
//! subject-independently with ROC/AUC, and run activity-gated streaming
//! inference with invocation accounting.

#![forbid(unsafe_code)]

pub mod config;
pub mod error;
pub mod eval;
pub mod gate;
pub mod ingest;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod windowing;

pub(crate) mod par;

pub use error::{Error, Result};
