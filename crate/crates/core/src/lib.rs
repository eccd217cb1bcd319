pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod reasoning;
pub mod rqvae;
pub mod trainer;
