//! Set-prediction object detection with dynamic query combinations.
//!
//! The detector forms its object queries per image as convex combinations of
//! groups of learned basic queries, with coefficients predicted from pooled
//! backbone features. The crate carries everything needed to train and study
//! that mechanism on CPU: a small reverse-mode autodiff engine, transformer
//! blocks, Hungarian matching and losses, a synthetic scene benchmark with
//! COCO-style AP, and an experiment harness.

pub mod detector;
pub mod error;
pub mod harness;
pub mod matching;
pub mod nn;
pub mod queries;
pub mod scenes;
pub mod tensor;

pub use error::{Error, Result};
