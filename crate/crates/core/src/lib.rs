//! Causality-encoded diffusion models.
//!
//! Per-node conditional score networks are trained by denoising score
//! matching on data from a known DAG, then integrated backwards in diffusion
//! time in topological order to sample observational and do-interventional
//! laws. The same sampler drives a resampling test for directed edges.

pub mod codec;
pub mod dag;
pub mod diffusion;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scm;
