//! Toy-scale latent-diffusion virtual try-on with explicit hand conditioning.
//!
//! The crate trains a small denoiser on procedurally generated hand-occluded
//! try-on scenes. Hand structure enters through three routes: pose-map control
//! branches with zero-initialized output projections, hand-parameter embedding
//! tokens attended to under a binary hand gate, and an edge-matching loss on
//! decoded hand crops at low noise levels. Everything runs in f64 on the CPU;
//! see `examples/` for runnable entry points per capability.

pub mod cli;
pub mod encoders;
pub mod graph;
pub mod handpose;
pub mod handprior;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod raster;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod tryon;
