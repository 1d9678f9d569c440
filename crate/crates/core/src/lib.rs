//! Multi-task anchor-based mitosis detector.
//!
//! A feature-pyramid detector with dense focal-loss classification and
//! smooth-L1 box regression, plus two auxiliary heads on the pooled deepest
//! pyramid level: tumor-type classification (cross-entropy) and patch
//! foreground classification (focal loss). Training uses seeded patch
//! sampling and color/geometric augmentation; evaluation reports AP at IoU
//! 0.5 and F1, and an ablation harness trains all eight combinations of the
//! three optional components.

pub mod augment;
pub mod cli;
pub mod config;
mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod plot;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
