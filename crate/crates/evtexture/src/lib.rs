//! Event-driven texture-enhanced video super-resolution.
//!
//! The crate covers the full desk-scale pipeline: ESIM-style event
//! simulation and voxelization, a bidirectional two-branch recurrent
//! network with an iterative texture-enhancement module, a training
//! harness, and an evaluation suite with texture-magnitude scoring.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod imageops;
pub mod io;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{EvError, Result};
