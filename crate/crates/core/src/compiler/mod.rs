//! Maps a network onto Head, Body, Tail and Classifier compute units and
//! emits the host schedule and memory layout.

pub mod buffers;
pub mod codec;
pub mod knobs;
pub mod partition;
pub mod plan;
pub mod report;
pub mod resources;
pub mod schedule;
