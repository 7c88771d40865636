pub mod compiler;
pub mod config;
pub mod error;
pub mod ir;
pub mod kernel;
pub mod quant;
pub mod runtime;
pub mod sweep;

pub use error::{Error, Result};
