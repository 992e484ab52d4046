pub mod analysis;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod fit;
pub mod math;
pub mod models;
pub mod outputs;
pub mod priors;
pub mod sampler;
pub mod service;
