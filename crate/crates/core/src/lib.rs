//! Y-GAN: a Y-shaped auto-encoder GAN for one-class anomaly detection.
//!
//! The semantic encoder `E_s` and residual encoder `E_r` split an image into
//! two latent codes. A latent classifier, a gradient-reversal layer and a
//! batch-shuffle consistency loss push class-relevant content into `z_s`
//! and nuisance content into `z_r`. At test time only `E_s` and the
//! classifier are evaluated: the anomaly score is one minus the largest
//! class probability.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod training;
pub mod weaklabels;

pub use error::{Result, YganError};
