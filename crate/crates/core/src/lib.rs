//! One-shot object detection with attention-based feature fusion.
//!
//! The crate bundles a small reverse-mode autodiff engine, the fusion necks
//! (prototype reweighting, kernel correlation, FPN, vertical and horizontal
//! attention), an anchor-free head with its losses, a synthetic episode
//! benchmark and AP50 evaluation.

pub mod attention;
pub mod backbone;
pub mod boxes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
