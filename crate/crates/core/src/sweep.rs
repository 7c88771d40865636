//! Model-size, operation, resource and throughput tables over a grid of
//! width multipliers and input resolutions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compiler::partition::CuKind;
use crate::compiler::plan::{compile, CompileOptions};
use crate::compiler::schedule::emit_schedule;
use crate::error::Result;
use crate::ir::count::{count_params_bits, count_ops, Complexity, BITS_PER_MB};
use crate::ir::graph::NetworkGraph;
use crate::ir::shape::{block_shapes, BitWidthMap};
use crate::runtime::perf::{estimate_performance, PerfParams};

pub const ALPHAS: [f64; 4] = [1.0, 0.75, 0.5, 0.35];
pub const RESOLUTIONS: [usize; 5] = [224, 192, 160, 128, 96];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub resolution: usize,
    pub params_bits: u64,
    pub ops: u64,
    /// Model size in Mb times operations in M.
    pub complexity: f64,
    pub invocations: usize,
    pub body_invocations: usize,
    pub multipliers: u64,
    pub dsp_fraction: f64,
    pub bram_fraction: f64,
    pub feasible: bool,
    pub fps: f64,
}

impl SweepRow {
    pub fn params_mb(&self) -> f64 {
        self.params_bits as f64 / BITS_PER_MB
    }

    pub fn ops_m(&self) -> f64 {
        self.ops as f64 / 1e6
    }
}

/// One row for shape graph `g` (already width-scaled) at `resolution`.
pub fn sweep_row(g: &NetworkGraph, resolution: usize, bw: u8, opts: &CompileOptions, perf: PerfParams) -> Result<SweepRow> {
    let bits = BitWidthMap::deployment(g, bw);
    let params_bits = count_params_bits(g, &bits)?;
    let ops = count_ops(g, resolution)?;
    let plan = compile(&g.arch_name, g.alpha, resolution, block_shapes(g, resolution, &bits)?, opts)?;
    let schedule = emit_schedule(&plan)?;
    let p = estimate_performance(&plan, &schedule, perf)?;
    Ok(SweepRow {
        alpha: g.alpha,
        resolution,
        params_bits,
        ops,
        complexity: Complexity::new(params_bits, ops).mb_mops(),
        invocations: plan.invocations.len(),
        body_invocations: plan.count(CuKind::Body),
        multipliers: plan.resources.multipliers,
        dsp_fraction: plan.resources.dsp_fraction,
        bram_fraction: plan.resources.bram_fraction,
        feasible: plan.resources.feasible,
        fps: p.fps,
    })
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    writeln!(s, "# ops: one op is one multiply-accumulate; Mb = 2^20 bits").unwrap();
    writeln!(
        s,
        "{:>5} {:>4} {:>10} {:>10} {:>12} {:>5} {:>4} {:>8} {:>7} {:>7} {:>8} {:>9}",
        "alpha", "H", "params_Mb", "ops_M", "complexity", "invoc", "body", "mults", "DSP%", "BRAM%", "feasible", "FPS"
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            "{:>5} {:>4} {:>10.3} {:>10.3} {:>12.1} {:>5} {:>4} {:>8} {:>7.1} {:>7.1} {:>8} {:>9.2}",
            r.alpha,
            r.resolution,
            r.params_mb(),
            r.ops_m(),
            r.complexity,
            r.invocations,
            r.body_invocations,
            r.multipliers,
            100.0 * r.dsp_fraction,
            100.0 * r.bram_fraction,
            r.feasible,
            r.fps
        )
        .unwrap();
    }
    s
}

/// Rows ordered by complexity (Mb x M ops), lightest first.
pub fn render_complexity(rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.complexity.total_cmp(&b.complexity));
    let mut s = String::new();
    writeln!(s, "{:>5} {:>4} {:>12} {:>9}", "alpha", "H", "complexity", "FPS").unwrap();
    for r in sorted {
        writeln!(s, "{:>5} {:>4} {:>12.1} {:>9.2}", r.alpha, r.resolution, r.complexity, r.fps).unwrap();
    }
    s
}
