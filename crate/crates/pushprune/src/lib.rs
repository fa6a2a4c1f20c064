//! Structural compression of neural networks by aligning class-separation
//! utility with individual neurons.
//!
//! The pipeline alternates a *pushing* phase — training with discriminant
//! losses that maximize class separation, decorrelate latent dimensions and
//! diagonalize the discriminant operator — with a *pruning* phase that
//! traces each neuron's contribution to final discriminability backwards
//! through the layers and removes whole channels of low utility. A greedy
//! growing step can first extend a modular base net when more capacity is
//! needed.

pub mod config;
pub mod data;
pub mod deconv;
pub mod error;
pub mod grow;
pub mod nn;
pub mod pipeline;
pub mod prune;
pub mod push;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
