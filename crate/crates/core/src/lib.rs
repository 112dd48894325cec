//! Severity grading for volumetric scans.
//!
//! The pipeline has two stages. A slice-wise segmentation stage first
//! extracts the lung region, then segments the lesions inside it; the
//! resulting infection mask is concatenated channel-wise with the volume
//! and fed to a 3D classifier trained with a joint contrastive / mixup /
//! weighted cross-entropy objective. A synthetic phantom generator
//! provides labeled (volume, lung, infection, severity) tuples so the
//! whole pipeline can be exercised and verified without clinical data.

pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod segmentation;
pub mod training;
pub mod volumes;

pub use error::{Error, Result};
