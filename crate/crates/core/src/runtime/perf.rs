//! Analytical latency model.
//!
//! An invocation first bursts its parameters on chip, then streams. Fused
//! stages run concurrently, so compute time is the slowest stage; the
//! feature streams overlap with compute, so the streaming phase takes the
//! larger of the two. Every windowed convolution adds its line-buffer fill.
//! Invocations run back to back. Only orderings are meaningful.

use serde::{Deserialize, Serialize};

use crate::compiler::knobs::op_cycles;
use crate::compiler::partition::CuKind;
use crate::compiler::plan::HardwarePlan;
use crate::compiler::schedule::Schedule;
use crate::error::{Error, Result};
use crate::kernel::conv::first_output_latency;
use crate::runtime::trace::{invocation_transactions, TransactionTrace};

pub const DEFAULT_FREQUENCY_HZ: f64 = 200e6;
pub const DEFAULT_BYTES_PER_CYCLE: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfParams {
    pub frequency_hz: f64,
    /// DDR bytes moved per cycle.
    pub bytes_per_cycle: u64,
}

impl Default for PerfParams {
    fn default() -> Self {
        PerfParams {
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            bytes_per_cycle: DEFAULT_BYTES_PER_CYCLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationPerf {
    pub index: usize,
    pub cu: CuKind,
    pub burst_cycles: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub fill_cycles: u64,
    pub latency: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEstimate {
    pub params: PerfParams,
    pub invocations: Vec<InvocationPerf>,
    pub total_cycles: u64,
    pub fps: f64,
}

impl PerfEstimate {
    pub fn compute_cycles(&self) -> u64 {
        self.invocations.iter().map(|i| i.compute_cycles).sum()
    }

    pub fn memory_cycles(&self) -> u64 {
        self.invocations.iter().map(|i| i.memory_cycles).sum()
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>3} {:<11} {:>10} {:>12} {:>12} {:>8} {:>12}\n",
            "#", "cu", "burst", "compute", "memory", "fill", "latency"
        );
        for i in &self.invocations {
            s.push_str(&format!(
                "{:>3} {:<11} {:>10} {:>12} {:>12} {:>8} {:>12}\n",
                i.index,
                i.cu.as_str(),
                i.burst_cycles,
                i.compute_cycles,
                i.memory_cycles,
                i.fill_cycles,
                i.latency
            ));
        }
        s.push_str(&format!(
            "total {} cycles, {:.2} FPS at {:.0} MHz\n",
            self.total_cycles,
            self.fps,
            self.params.frequency_hz / 1e6
        ));
        s
    }
}

pub fn estimate_performance(plan: &HardwarePlan, schedule: &Schedule, params: PerfParams) -> Result<PerfEstimate> {
    if params.bytes_per_cycle == 0 || !(params.frequency_hz > 0.0) {
        return Err(Error::Config("frequency and memory width must be positive".into()));
    }
    let mut invocations = Vec::with_capacity(schedule.invocations.len());
    for inv in &schedule.invocations {
        let cu = plan
            .cu(inv.cu)
            .ok_or_else(|| Error::Runtime(format!("plan has no {} unit", inv.cu.as_str())))?;
        let mut compute = 0u64;
        let mut fill = 0u64;
        for op in inv.blocks.iter().flat_map(|b| b.ops.iter()) {
            compute = compute.max(op_cycles(op, &cu.knobs)?);
            if op.role.is_windowed() {
                fill += first_output_latency(op.k, op.input.w + 2 * op.padding()) as u64;
            }
        }
        let mut t = TransactionTrace::default();
        invocation_transactions(schedule, inv, &mut t);
        let totals = t.totals();
        let burst = totals.burst_bytes.div_ceil(params.bytes_per_cycle);
        let memory = totals.stream_bytes().div_ceil(params.bytes_per_cycle);
        invocations.push(InvocationPerf {
            index: inv.index,
            cu: inv.cu,
            burst_cycles: burst,
            compute_cycles: compute,
            memory_cycles: memory,
            fill_cycles: fill,
            latency: burst + compute.max(memory) + fill,
        });
    }
    let total_cycles: u64 = invocations.iter().map(|i| i.latency).sum();
    Ok(PerfEstimate {
        params,
        invocations,
        total_cycles,
        fps: if total_cycles == 0 {
            0.0
        } else {
            params.frequency_hz / total_cycles as f64
        },
    })
}
