//! Core library for a small molecular diffusion model.
//!
//! A molecule is encoded as a fixed-size multi-channel tensor (coordinate
//! channel, atom-type grid, bond-order grid).  An SE(3)-equivariant attention
//! layer preprocesses the coordinate channel, a diffusion transformer predicts
//! per-element noise and variance, and an ancestral sampler walks the reverse
//! chain.  Evaluation uses geometric bond inference and valence-based
//! stability checks.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diffusion;
pub mod dit;
pub mod encoding;
pub mod equiattn;
pub mod metrics;
pub mod molgraph;
pub mod params;
pub mod so3;
pub mod tape;
