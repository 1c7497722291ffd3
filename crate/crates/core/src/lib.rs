//! Cross-view semantics interaction network for referring image segmentation.
//!
//! The model sees each image twice: a low-resolution remote view and a grid of
//! close-view patches cut from a higher-resolution resize. Between backbone
//! stages, [`cvwin`] aligns language to each view and exchanges information
//! between paired windows of the two views. The [`cdad`] decoder enhances the
//! top stage with dilated row attention and fuses all stages into a mask.

pub mod backbone;
pub mod cdad;
pub mod checkpoint;
pub mod config;
pub mod cvwin;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod text;
pub mod train;

pub use error::{Error, Result};
