//! Desk-scale latent diffusion with gradient-weighted cross-attention masks.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – dense `f64` tensors and a define-by-run reverse-mode tape.
//! * [`nn`] – the autoencoder, token embedder and conditional UNet.
//! * [`diffusion`] – DDPM schedule, forward noising and the ancestral step.
//! * [`attribution`] – Jacobians of the predicted noise with respect to
//!   cross-attention weights, and per-subject importance fields.
//! * [`maskops`] – blur, dilation, quantile thresholding and mask algebra.
//! * [`pipeline`] – masked img2img generation with latent blending.
//! * [`datasynth`], [`training`], [`evalmetrics`] – the synthetic dataset,
//!   the trainers and the FID / alignment metrics used to evaluate it.

pub mod attribution;
pub mod datasynth;
pub mod diffusion;
mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod imageio;
pub mod maskops;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, NodeId, Tensor};
