//! Two-stage text-to-3D generation over triplane fields.
//!
//! Stage one trains an unconditional triplane GAN against single-view
//! renders of a procedural corpus; stage two captions GAN samples with an
//! attribute classifier and distills them into a text-conditioned triplane
//! diffusion model sampled with deterministic DDIM and classifier-free
//! guidance.

pub mod artifact;
pub mod diffusion;
pub mod error;
pub mod gan;
pub mod image;
pub mod nn;
pub mod perception;
pub mod pipeline;
pub mod renderer;
pub mod scenegen;
pub mod seed;
pub mod triplane;

pub use error::{Error, Result};
