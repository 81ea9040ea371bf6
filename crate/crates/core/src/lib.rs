//! Multi-point detection with mixture density networks.
//!
//! A small convolutional network maps each image patch to an isotropic
//! Gaussian mixture over object-center coordinates plus a Bernoulli gate
//! giving the probability that the patch contains any object. Training
//! minimizes the gated multi-target negative log-likelihood; inference keeps
//! confident components, renders them into a probability map and reads
//! detections off its local maxima.
//!
//! Modules, bottom-up:
//!
//! - [`mixture`]: constraints, densities, loss and analytic gradients.
//! - [`network`]: backbone, head, training loop and checkpoints.
//! - [`synth`] and [`dataset`]: synthetic annotated scenes, point dilation,
//!   patch cropping and the on-disk dataset layout.
//! - [`pipeline`]: tiling, rendering, stitching and peak finding.
//! - [`eval`]: matching, precision/recall/F1 and the sparse-annotation
//!   experiment.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod mixture;
pub mod network;
pub mod pipeline;
pub mod synth;
pub mod tiling;

pub use error::{Error, Result};
