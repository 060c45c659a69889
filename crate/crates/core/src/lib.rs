//! Point clouds through a frozen vision transformer.
//!
//! A trainable lens (per-patch point embedding followed by a Perceiver) turns a
//! point cloud into a fixed number of latent tokens. Those tokens replace the
//! patch tokens of a frozen ViT whose CLS output, projected into a joint space,
//! is aligned with frozen image and text teachers by a contrastive loss.
//!
//! Modules, bottom-up:
//! - [`numerics`]: tensors, reverse-mode tape, finite-difference checks
//! - [`pointcloud`]: IO, normalization, FPS/KNN patchification, synthetic shapes
//! - [`lens`]: point embedding and Perceiver
//! - [`backbone`]: the frozen ViT, unlock selectors and the encoder pipeline
//! - [`alignment`]: teachers, contrastive loss, optimizer, trainer, checkpoints
//! - [`zeroshot`]: prompt-based class embeddings and top-k evaluation
//! - [`config`]: the canonical run configuration

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod backbone;
pub mod config;
pub mod error;
pub mod lens;
pub(crate) mod nn;
pub mod numerics;
pub mod params;
pub mod pointcloud;
pub mod zeroshot;

pub use error::{Error, Result};
