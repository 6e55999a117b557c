//! Labeled LiDAR scan synthesis with controllable rare-class instance counts,
//! label unification, baseline augmentations, segmentation metrics and a
//! prototype-based cross-domain contrastive loss.

pub mod augment;
pub mod csc;
pub mod dataset;
pub mod error;
pub mod generate;
pub mod geometry;
pub mod labelmap;
pub mod metrics;
pub mod rebalance;
pub mod rng;
pub mod scene;
pub mod sensor;

pub use error::{Error, Result};
