pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod reward_model;
pub mod rng;
pub mod metrics;
pub mod self_evolve;
pub mod theory;
pub mod world;

pub use error::{Result, SerError};
