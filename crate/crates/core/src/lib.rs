//! Collaborative detection and segmentation of small, low-contrast targets in
//! volumetric scans.

pub mod ablation;
pub mod checkpoint;
pub mod collab;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod segmenter;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
