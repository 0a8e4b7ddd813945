//! Multipartite entanglement classification of qubit density matrices.

pub mod autograd;
pub mod dataset;
pub mod entanglement;
pub mod error;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod stategen;

pub use error::{Error, Result};
pub use exec::Execution;
