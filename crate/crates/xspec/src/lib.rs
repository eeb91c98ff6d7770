//! Cross-spectrum face identification at desk scale: Stokes polarimetry,
//! difference-of-Gaussians preprocessing, a coupled embedding network with
//! contrastive training, and a repeated-random-split identification
//! protocol, plus a synthetic data generator for end-to-end runs.
//!
//! Everything is deterministic for a fixed master seed: all randomness flows
//! through ChaCha20 streams derived with [`rng::derive_seed`], and all
//! keyed collections are ordered.

pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod net;
pub mod pairgen;
pub mod pipeline;
pub mod polarimetry;
pub mod preproc;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
