//! Executes a schedule on the kernel simulators against a shared DDR image.

pub mod exec;
pub mod memory;
pub mod perf;
pub mod trace;
