//! Inter-intra contrastive (IIC) self-supervised video representation learning.
//!
//! The crate is organised along the training pipeline:
//!
//! - [`clip`]: video clips, the two input views and intra-negative generation.
//! - [`encoder`]: a small residual 3D convolutional encoder with analytic backward.
//! - [`contrastive`]: memory banks, the cosine critic and the inter-intra loss.
//! - [`trainer`]: the training loop and SGD with a milestone schedule.
//! - [`finetune`]: supervised fine-tuning with a linear classification head.
//! - [`retrieval`]: per-video features, joint two-view features and kNN evaluation.
//! - [`datasets`]: the synthetic reversal-pair motion dataset and manifests.
//! - [`formats`]: the little-endian binary file formats.

pub mod clip;
pub mod contrastive;
pub mod datasets;
pub mod encoder;
mod error;
pub mod finetune;
pub mod formats;
pub mod retrieval;
pub mod seed;
pub mod trainer;

pub use error::{ErrorKind, IicError, Result};
