//! Vision-foundation-aligned VAE tokenizer, a small rectified-flow diffusion
//! transformer, and latent uniformity diagnostics, built on a compact
//! reverse-mode autodiff core.

pub mod data;
pub mod diagnostics;
pub mod foundation;
pub mod io;
pub mod lightningdit;
pub mod numerics;
pub mod selfcheck;
pub mod tokenizer;
pub mod vfloss;

pub use numerics::{NumericsError, Tensor};
