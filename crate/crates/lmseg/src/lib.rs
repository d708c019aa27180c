//! Semantic segmentation of landscape triangle meshes.
//!
//! The pipeline converts a textured triangle mesh into its barycentric dual
//! graph (one node per face, edges between adjacent faces), builds a pooling
//! hierarchy by random node sub-sampling plus edge similarity pooling, and
//! runs a hierarchical message-passing encoder/decoder over it. Training,
//! evaluation, a synthetic dataset generator, and a sampling benchmark are
//! included; the `lmseg` binary exposes all of it.

pub mod autodiff;
pub mod bench;
pub mod config;
pub mod error;
pub mod ga;
pub mod dual;
pub mod mesh;
pub mod net;
pub mod nn;
pub mod metrics;
pub mod pooling;
pub mod synth;
pub mod train;
pub mod rng;

pub use error::{Error, Result};
