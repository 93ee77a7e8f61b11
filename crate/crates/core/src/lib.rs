//! Deterministic simulator for buffered asynchronous federated learning with
//! entropy-weighted server-side distillation from cached client logits.

pub mod algorithms;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runner;
pub mod simulator;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use model::{Architecture, Batch, Logits, ModelParams};
pub use rng::RngStream;
pub use tensor::DenseMatrix;
