//! Proposal cluster learning (PCL) for weakly supervised object detection.
//!
//! A basic multiple-instance detection head is trained from image-level tags
//! alone, and `K` refined instance classifiers are trained online from
//! proposal clusters built out of the previous stream's scores. Everything
//! operates on fixed per-proposal raw features, which makes the whole
//! pipeline small enough to run and verify on a laptop.

pub mod cli;
pub mod clustering;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{PclError, Result};
pub use geometry::{iou, nms, BBox, Detection};
