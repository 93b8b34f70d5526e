//! Volumetric brain-tumour segmentation with an adversarially trained
//! pseudo-3D residual V-Net and a CRF-RNN refinement stage.
//!
//! - [`volgrad`]: tape-based reverse-mode autodiff over 5-D tensors.
//! - [`nn`]: parameter store, convolution layers and pseudo-3D blocks.
//! - [`generator`], [`crf`], [`discriminator`]: the three networks.
//! - [`training`]: losses, Adam, the alternating loop, logs and checkpoints.
//! - [`metrics`]: Dice, Hausdorff distance, sensitivity and specificity.
//! - [`data`]: volumes, MVOL/NIfTI I/O, preprocessing and synthetic phantoms.
//! - [`config`]: the flat JSON run configuration.

pub mod config;
pub mod crf;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod training;
pub mod volgrad;

pub use error::{Error, Result};
