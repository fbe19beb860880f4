pub mod archive;
pub mod body_model;
pub mod data_pipeline;
pub mod error;
pub mod global_fit;
pub mod harness;
pub mod lifting_net;
pub mod metrics;
pub mod motion_repr;
pub mod nn;
pub mod occlusion_synth;
pub mod prior_net;

pub use error::{Error, Result};
