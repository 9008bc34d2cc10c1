//! Few-shot image classification with learned channel-wise aggregation.
//!
//! Support examples of a class are embedded by a four-block convolutional
//! network. Instead of averaging them into a prototype, a small attention
//! network shared by all channels looks at the same-channel feature maps
//! of several examples at once and produces per-example weights for that
//! channel. Queries are classified by a softmax over negative Euclidean
//! distances to the aggregated class representatives. Training is
//! episodic, with one channel-dropout mask drawn per episode.
//!
//! Layout:
//!
//! - [`tensor`], [`graph`], [`kernels`], [`optim`]: dense tensors, a
//!   reverse-mode tape, layer kernels and Adam.
//! - [`model`]: parameters, embedding and attention networks, aggregation,
//!   distances and the episode loss.
//! - [`data`], [`episode`]: datasets, preprocessing and episode sampling.
//! - [`train`], [`eval`]: the meta-training loop and multi-seed evaluation.
//! - [`container`], [`config`], [`cli`]: file formats and the command-line
//!   front end.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
