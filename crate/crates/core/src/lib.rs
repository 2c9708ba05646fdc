//! Compiler and runtime for declarative multi-stage message passing graph
//! neural networks over heterogeneous graphs.

pub mod diagnostics;
pub mod schema;
pub mod tensor;
pub mod error;
pub mod nn;
pub mod validator;
pub mod dataset;
pub mod runtime;
pub mod training;
pub mod zoo;

pub use error::{Error, Result};
