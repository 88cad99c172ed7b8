//! Region-controlled cross-attention for a DiT-style denoiser.
//!
//! The crate splits a latent grid into regions, builds one text state per
//! regional prompt, and routes each region's queries to its own prompt inside
//! the cross-attention of selected transformer blocks. Around that core sit a
//! CFG Euler sampler, a progressive prompt generator, image metrics and the
//! f64 reference oracles used by the tests.
//!
//! Row-parallel kernels use rayon when the `parallel` feature is on (the
//! default) and plain loops otherwise; both give bit-identical results.

pub mod attention;
pub mod dit;
pub mod fixture;
pub mod image;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod prompts;
pub mod regions;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod text;

pub use rng::RngSeed;
pub use tensor::{Tensor, TensorError};
