//! Batch-norm fusion, calibration and quantization.

pub mod bn;
pub mod calibrate;
pub mod float_forward;
pub mod qnet;
pub mod qnet_manifest;
pub mod requant;
pub mod spec;
