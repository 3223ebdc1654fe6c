//! Training-free mechanisms for text-driven style transfer on latent diffusion
//! backends: cross-modal AdaIN fusion of text and style cross-attention,
//! style-based classifier-free guidance with a negative style image, and
//! teacher-guided self-attention replacement during early denoising steps.
//!
//! [`toy`] provides a deterministic desk-scale backend on which every
//! mechanism is exactly testable; real backends implement
//! [`pipeline::backend::Backend`].

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod pipeline;
pub mod teacher;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use pipeline::{generate, GenerationConfig};
