//! Dual-view (short-axis / long-axis) cardiac MR right-ventricle
//! segmentation: data handling, preprocessing, a synthetic phantom
//! generator, the fused dual U-Net with hand-written backpropagation,
//! k-fold training, ensemble inference and challenge-style metrics.

pub mod augment;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};
