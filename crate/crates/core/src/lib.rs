//! Decoupled global/local prediction for swarm learning on non-IID
//! segmentation data.
//!
//! A shared segmentation network, prior and posterior latent encoders are
//! aggregated across centers; each center additionally keeps a private
//! distribution-adaptation network that maps the latent code to per-pixel
//! label-transition matrices. The crate contains everything needed to
//! simulate the protocol at desk scale: a small autodiff engine, the
//! networks and losses, synthetic multi-center data, the round-based swarm
//! runner and the evaluation harness.

pub mod config;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nets;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod swarm;
pub mod synthdata;
pub mod tensor;
