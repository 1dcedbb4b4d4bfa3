//! GKGNet: grouped K-nearest-neighbor graph convolution for multi-label
//! image recognition.
//!
//! Patch nodes and learnable label nodes flow through four pyramid stages.
//! Each stage updates patches with patch-level Group KGCN modules and then
//! labels with cross-level modules whose edges run from patches to labels.

pub mod cli;
pub mod data;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
