//! Redundancy-robust token selection for masked video autoencoders.
//!
//! Tokens are scored by how far their tube embedding moved since the previous
//! frame pair; only the highest-scoring fraction is ever reconstructed, and a
//! random subset of those is shown to the encoder. The same scores drive an
//! on-the-fly frame-pair sampler, and an analytic cost model accounts for the
//! compute and activation memory saved.

pub mod cli;
pub mod costmodel;
pub mod embedding;
pub mod frameselect;
pub mod mva;
pub mod numerics;
pub mod rero;
pub mod seed;
pub mod videodata;
