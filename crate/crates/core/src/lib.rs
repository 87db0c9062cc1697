//! Conditional generation of lane-change trajectories.
//!
//! The crate covers the full path from raw vehicle tracks to generated
//! maneuvers:
//!
//! * [`data`]: ingestion of recorded tracks, lane-change extraction and
//!   labeling, delta encoding and normalization, and a synthetic track
//!   generator for end-to-end testing.
//! * [`tensor`]: a small dense-tensor reverse-mode differentiation engine;
//!   all models train through it.
//! * [`nn`]: attention, transformer blocks and the condition-aware layers
//!   shared by both generators.
//! * [`diffusion`]: the denoising-diffusion trajectory generator with
//!   classifier-free conditioning.
//! * [`cvae`]: a conditional VAE baseline with the same interface.
//! * [`eval`]: displacement metrics, set coverage and density grids used to
//!   compare generators against held-out data.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod tensor;

pub mod cvae;

pub use error::{Error, Result};
