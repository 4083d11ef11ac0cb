//! Safe skill planning: skills and a PU-trained risk predictor learned from
//! offline demonstrations, then risk-planned skill selection for online
//! safe RL on small constrained MDPs.

pub mod agent;
pub mod config;
pub mod demo;
pub mod env;
pub mod error;
pub mod gaussian;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod risk;
pub mod rng;
pub mod skills;

pub use error::{Error, Result};
pub use gaussian::DiagGaussian;
