//! Probabilistic segmentation with structured latent spaces.
//!
//! The crate trains a probabilistic U-Net on images with multiple
//! ground-truth annotations per image and measures how well the learned
//! distribution over segmentations matches the annotator distribution.
//! The latent space can be an axis-aligned Gaussian, a full-covariance
//! Gaussian, a low-rank-plus-diagonal Gaussian, or a mixture of Gaussians;
//! all of them sample differentiably so the whole model trains end to end
//! with the reparameterization trick.

// validation guards are written `!(x > 0.0)` so NaN fails closed
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
