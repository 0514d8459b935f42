//! Label-space unification for multi-domain semantic segmentation.
//!
//! Merges the taxonomies of several segmentation datasets into one universal
//! label-space, remaps their annotations, picks class-balanced validation
//! splits and evaluates predictions with per-class IoU and mIoU.

pub mod catalog;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod raster;
pub mod splitter;
pub mod taxonomy;

pub use error::{Error, Result};
