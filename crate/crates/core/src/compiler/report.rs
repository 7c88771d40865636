//! Human-readable and machine-readable renderings of a compiled plan.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compiler::plan::HardwarePlan;
use crate::compiler::schedule::Schedule;

/// Counting convention and mapping rule stated at the top of every report.
pub const REPORT_HEADER: &[&str] = &[
    "ops: one op is one multiply-accumulate; bias additions and requantization are not counted",
    "mapping: Body is the longest contiguous run of structurally identical inverted residual blocks; \
     blocks before it form Head, the trailing pointwise and pooling form Tail, dense layers form Classifier",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub header: Vec<String>,
    pub plan: HardwarePlan,
    pub schedule: Schedule,
}

impl PlanDocument {
    pub fn new(plan: HardwarePlan, schedule: Schedule) -> Self {
        PlanDocument {
            header: REPORT_HEADER.iter().map(|s| s.to_string()).collect(),
            plan,
            schedule,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan documents always serialize")
    }
}

pub fn render_text(plan: &HardwarePlan, schedule: &Schedule) -> String {
    let mut s = String::new();
    for line in REPORT_HEADER {
        writeln!(s, "# {line}").unwrap();
    }
    writeln!(s, "\n{} alpha={} H={}", plan.arch, plan.alpha, plan.resolution).unwrap();

    writeln!(s, "\n## Compute units").unwrap();
    writeln!(s, "{:<11} {:>11} {:>6} {:>11} {:>12}  template", "cu", "invocations", "fused", "multipliers", "buffer_bits").unwrap();
    for cu in &plan.cus {
        let template: Vec<&str> = cu.template.iter().map(|r| r.as_str()).collect();
        writeln!(
            s,
            "{:<11} {:>11} {:>6} {:>11} {:>12}  {}",
            cu.kind.as_str(),
            cu.invocations.len(),
            cu.fused_layers,
            cu.multipliers,
            cu.buffers.total_bits(),
            template.join(" > ")
        )
        .unwrap();
    }

    writeln!(s, "\n## Knobs").unwrap();
    writeln!(s, "{:<11} {:<11} {:>5} {:>6} {:>6} {:>12} {:>9}", "cu", "slot", "k_max", "n_max", "lanes", "parallel_ops", "instances").unwrap();
    for cu in &plan.cus {
        for k in &cu.knobs {
            writeln!(
                s,
                "{:<11} {:<11} {:>5} {:>6} {:>6} {:>12} {:>9}",
                cu.kind.as_str(),
                k.slot.as_str(),
                k.k_max,
                k.n_max,
                k.lanes,
                k.parallel_ops,
                k.instances
            )
            .unwrap();
        }
    }

    writeln!(s, "\n## Buffers").unwrap();
    writeln!(s, "{:<11} {:<15} {:<18} {:>12}", "cu", "role", "kind", "bits").unwrap();
    for cu in &plan.cus {
        for e in &cu.buffers.entries {
            writeln!(s, "{:<11} {:<15} {:<18} {:>12}", cu.kind.as_str(), e.role.as_str(), e.kind.as_str(), e.bits).unwrap();
        }
        if cu.buffers.residual_operand_bits > 0 {
            writeln!(
                s,
                "{:<11} residual operand {} bits, placed {:?}",
                cu.kind.as_str(),
                cu.buffers.residual_operand_bits,
                cu.buffers.residual
            )
            .unwrap();
        }
    }

    let r = &plan.resources;
    writeln!(s, "\n## Resources ({})", r.device).unwrap();
    writeln!(s, "multipliers {}  DSP {:.1}%", r.multipliers, 100.0 * r.dsp_fraction).unwrap();
    writeln!(s, "buffer bits {}  BRAM {:.1}%", r.buffer_bits, 100.0 * r.bram_fraction).unwrap();
    writeln!(s, "LUT {}", r.lut).unwrap();
    writeln!(s, "feasible {}", r.feasible).unwrap();
    for o in &r.over_budget {
        writeln!(s, "  over budget: {o}").unwrap();
    }

    writeln!(s, "\n## Schedule").unwrap();
    writeln!(s, "{:>3} {:<11} {:<12} {:>12} {:>12} {:>4} {:>4}  residual", "#", "cu", "blocks", "input", "output", "in", "out").unwrap();
    for inv in &schedule.invocations {
        let first = inv.blocks.first().map_or(0, |b| b.index);
        let last = inv.blocks.last().map_or(0, |b| b.index);
        writeln!(
            s,
            "{:>3} {:<11} {:<12} {:>12} {:>12} {:>4} {:>4}  {:?}",
            inv.index,
            inv.cu.as_str(),
            format!("{first}..={last}"),
            inv.input.to_string(),
            inv.output.to_string(),
            inv.input_region,
            inv.output_region,
            inv.residual
        )
        .unwrap();
    }

    writeln!(s, "\n## Memory map ({} bytes)", schedule.layout.total_bytes).unwrap();
    writeln!(s, "{:>4} {:<28} {:<12} {:>10} {:>10}  live", "id", "region", "kind", "offset", "len").unwrap();
    for (i, reg) in schedule.layout.regions.iter().enumerate() {
        writeln!(
            s,
            "{:>4} {:<28} {:<12} {:>10} {:>10}  {}..={}",
            i,
            reg.name,
            format!("{:?}", reg.kind),
            reg.offset,
            reg.len,
            reg.live[0],
            reg.live[1]
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::plan::{compile, CompileOptions};
    use crate::compiler::schedule::emit_schedule;
    use crate::ir::shape::{block_shapes, BitWidthMap};
    use crate::ir::zoo;

    fn doc() -> PlanDocument {
        let g = zoo::by_name("mobilenet_v2", 0.5, 96, None).unwrap();
        let blocks = block_shapes(&g, 96, &BitWidthMap::deployment(&g, 4)).unwrap();
        let plan = compile("mobilenet_v2", 0.5, 96, blocks, &CompileOptions::default()).unwrap();
        let sched = emit_schedule(&plan).unwrap();
        PlanDocument::new(plan, sched)
    }

    #[test]
    fn text_lists_every_table() {
        let d = doc();
        let text = render_text(&d.plan, &d.schedule);
        for section in ["## Compute units", "## Knobs", "## Buffers", "## Resources", "## Schedule", "## Memory map"] {
            assert!(text.contains(section), "{section}");
        }
        assert!(text.contains("multiply-accumulate"));
        assert!(text.lines().any(|l| l.starts_with("body ") && l.split_whitespace().nth(1) == Some("16")));
    }

    #[test]
    fn json_round_trips() {
        let d = doc();
        let back: PlanDocument = serde_json::from_str(&d.to_json()).unwrap();
        assert_eq!(back, d);
    }
}
