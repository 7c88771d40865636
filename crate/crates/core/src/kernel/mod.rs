//! Streaming kernel simulator: bit-exact models of the accelerator
//! datapaths, the pipeline drivers that connect them, and the naive
//! reference operators they are checked against.

pub mod conv;
pub mod line_buffer;
pub mod ops;
pub mod pipeline;
pub mod reference;
pub mod stream;
pub mod synth;
