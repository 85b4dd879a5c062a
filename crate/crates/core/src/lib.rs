//! Toy end-to-end interleaved image-text generative model built around a
//! multi-scale, multi-image deformable feature synchronizer (MMFS).
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: shaped tensors, a reverse-mode autodiff graph, a seedable
//!   counter-based PRNG and a finite-difference gradient checker;
//! - [`pyramid`]: multi-scale per-image feature maps and differentiable
//!   bilinear sampling;
//! - [`mmfs`]: the feature synchronizer (sampling-plan prediction, deformable
//!   attention, gated residual application);
//! - [`sequence`]: interleaved token streams, visibility and packing;
//! - [`resampler`]: perceiver-style fixed-token resampling;
//! - [`mmllm`]: a toy causal LM with MMFS layers;
//! - [`imgdec`]: a toy diffusion image decoder with MMFS after each
//!   downsampling block;
//! - [`pipeline`]: the combined training objective, generation and
//!   checkpointing;
//! - [`bench`]: analytic FLOPs model and runtime harness;
//! - [`cli`]: the `mmiv` command-line entry points.




pub mod bench;
pub mod cli;
pub mod error;
pub mod pyramid;
pub mod resampler;
pub mod sequence;



pub mod imgdec;
pub mod mmfs;
pub mod mmllm;
pub mod numcore;
pub mod pipeline;
pub mod tasks;






pub use error::{Error, Result};
