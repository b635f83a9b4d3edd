//! Desk-scale 2D medical-image segmentation lab: seven encoder-decoder
//! networks over a minimal autodiff tensor engine, a synthetic-phantom
//! data pipeline, cross-validated training, sliding-window inference with
//! probability-averaging ensembles, and the metrics/statistics suite.

pub mod arch;
pub mod blocks;
pub mod data;
pub mod eval;
pub mod infer;
pub mod error;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
