//! The hardware plan: compute units with knobs, buffers and resources.

use serde::{Deserialize, Serialize};

use crate::compiler::buffers::{size_buffers, BufferTable, ResidualPlacement};
use crate::compiler::knobs::{derive_knobs, validate_overrides, Knob, KnobOverrides};
use crate::compiler::partition::{partition, BlockKey, CuKind, Invocation};
use crate::compiler::resources::{estimate_resources, DeviceProfile, ResourceReport};
use crate::error::{Error, Result};
use crate::ir::shape::{BlockShape, OpRole, OpShape};

pub const DEFAULT_RESIDUAL_BUDGET_BITS: u64 = 256 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileOptions {
    pub device: DeviceProfile,
    /// Largest residual operand held on chip; larger ones go off chip.
    pub residual_budget_bits: u64,
    /// FIFO depth in elements; `None` sizes each FIFO to one output row.
    pub fifo_depth: Option<usize>,
    pub knob_overrides: KnobOverrides,
    pub map_classifier: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            device: DeviceProfile::xczu9eg(),
            residual_budget_bits: DEFAULT_RESIDUAL_BUDGET_BITS,
            fifo_depth: None,
            knob_overrides: KnobOverrides::new(),
            map_classifier: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeUnitPlan {
    pub kind: CuKind,
    /// Operator kinds the unit supports, in datapath order.
    pub template: Vec<OpRole>,
    /// Fused layers; squeeze-excite counts as its squeeze and excite layers.
    pub fused_layers: usize,
    pub invocations: Vec<usize>,
    pub knobs: Vec<Knob>,
    pub buffers: BufferTable,
    pub multipliers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwarePlan {
    pub arch: String,
    pub alpha: f64,
    pub resolution: usize,
    pub body_key: BlockKey,
    pub blocks: Vec<BlockShape>,
    pub invocations: Vec<Invocation>,
    pub cus: Vec<ComputeUnitPlan>,
    pub resources: ResourceReport,
    pub options: CompileOptions,
}

const ROLE_ORDER: [OpRole; 9] = [
    OpRole::NormalConv,
    OpRole::PwExpand,
    OpRole::Depthwise,
    OpRole::SqueezeExcite,
    OpRole::PwProject,
    OpRole::Pointwise,
    OpRole::AvgPool,
    OpRole::ResidualAdd,
    OpRole::Dense,
];

impl HardwarePlan {
    pub fn cu(&self, kind: CuKind) -> Option<&ComputeUnitPlan> {
        self.cus.iter().find(|c| c.kind == kind)
    }

    pub fn invocation_blocks(&self, index: usize) -> Vec<&BlockShape> {
        self.invocations[index].blocks.iter().map(|&b| &self.blocks[b]).collect()
    }

    pub fn invocation_ops(&self, index: usize) -> impl Iterator<Item = &OpShape> {
        self.invocations[index]
            .blocks
            .iter()
            .flat_map(move |&b| self.blocks[b].ops.iter())
    }

    /// MACs mapped onto invocation `index`.
    pub fn invocation_macs(&self, index: usize) -> u64 {
        self.invocation_ops(index).map(OpShape::macs).sum()
    }

    pub fn count(&self, kind: CuKind) -> usize {
        self.invocations.iter().filter(|i| i.cu == kind).count()
    }

    /// Recomputes every knob-derived quantity after editing knobs.
    pub fn refresh_resources(&mut self) {
        for cu in &mut self.cus {
            cu.multipliers = cu.knobs.iter().map(|k| k.parallel_ops).sum();
        }
        let mult = self.cus.iter().map(|c| c.multipliers).sum();
        let bits = self.cus.iter().map(|c| c.buffers.total_bits()).sum();
        self.resources = estimate_resources(mult, bits, &self.options.device);
    }
}

/// Partitions `blocks`, derives knobs and buffers per compute unit and
/// estimates resources against the device in `opts`.
pub fn compile(arch: &str, alpha: f64, resolution: usize, blocks: Vec<BlockShape>, opts: &CompileOptions) -> Result<HardwarePlan> {
    validate_overrides(&opts.knob_overrides)?;
    opts.device.validate()?;
    let part = partition(&blocks, opts.map_classifier)?;
    let mut cus = Vec::new();
    for kind in [CuKind::Head, CuKind::Body, CuKind::Tail, CuKind::Classifier] {
        let invs: Vec<&Invocation> = part.invocations.iter().filter(|i| i.cu == kind).collect();
        if invs.is_empty() {
            continue;
        }
        let mapped: Vec<&BlockShape> = invs.iter().flat_map(|i| i.blocks.iter().map(|&b| &blocks[b])).collect();
        let template: Vec<OpRole> = ROLE_ORDER
            .into_iter()
            .filter(|r| mapped.iter().any(|b| b.has_role(*r)))
            .collect();
        let fused_layers = template
            .iter()
            .map(|r| if *r == OpRole::SqueezeExcite { 2 } else { 1 })
            .sum();
        let knobs = derive_knobs(kind, mapped.iter().flat_map(|b| b.ops.iter()), &opts.knob_overrides);
        let buffers = size_buffers(&mapped, opts.fifo_depth, opts.residual_budget_bits);
        if buffers.residual == ResidualPlacement::OffChip {
            for inv in &invs {
                if let Some(&b) = inv.blocks.iter().skip(1).find(|&&b| blocks[b].residual) {
                    return Err(Error::Compile(format!(
                        "block {b}: an off-chip residual must start its invocation"
                    )));
                }
            }
        }
        cus.push(ComputeUnitPlan {
            kind,
            template,
            fused_layers,
            invocations: invs.iter().map(|i| i.index).collect(),
            multipliers: knobs.iter().map(|k| k.parallel_ops).sum(),
            knobs,
            buffers,
        });
    }
    let mut plan = HardwarePlan {
        arch: arch.to_string(),
        alpha,
        resolution,
        body_key: part.body_key,
        blocks,
        invocations: part.invocations,
        cus,
        resources: estimate_resources(0, 0, &opts.device),
        options: opts.clone(),
    };
    plan.refresh_resources();
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::knobs::{knob, Slot};
    use crate::ir::count::count_ops;
    use crate::ir::shape::{block_shapes, BitWidthMap};
    use crate::ir::zoo;

    fn plan(arch: &str, alpha: f64, res: usize, opts: &CompileOptions) -> HardwarePlan {
        let g = zoo::by_name(arch, alpha, res, None).unwrap();
        let blocks = block_shapes(&g, res, &BitWidthMap::deployment(&g, 4)).unwrap();
        compile(arch, alpha, res, blocks, opts).unwrap()
    }

    #[test]
    fn mapping_is_complete() {
        for (arch, alpha, res) in [("mobilenet_v2", 0.5, 96), ("mobilenet_v2", 1.0, 224), ("toy", 1.0, 16)] {
            let p = plan(arch, alpha, res, &CompileOptions::default());
            let g = zoo::by_name(arch, alpha, res, None).unwrap();
            let mapped: u64 = (0..p.invocations.len()).map(|i| p.invocation_macs(i)).sum();
            assert_eq!(mapped, count_ops(&g, res).unwrap());
        }
    }

    #[test]
    fn efficientnet_body_fuses_six_layers() {
        let opts = CompileOptions {
            map_classifier: false,
            ..CompileOptions::default()
        };
        let p = plan("efficientnet_compressed", 1.0, 128, &opts);
        let body = p.cu(CuKind::Body).unwrap();
        assert_eq!(body.invocations.len(), 9);
        assert_eq!(body.fused_layers, 6);
        assert_eq!(p.invocations.len(), 11);
    }

    #[test]
    fn knobs_dominate_every_instance() {
        let p = plan("mobilenet_v2", 0.75, 160, &CompileOptions::default());
        for cu in &p.cus {
            for &i in &cu.invocations {
                for op in p.invocation_ops(i) {
                    for (slot, k, n, _) in crate::compiler::knobs::slot_uses(op) {
                        let kn = knob(&cu.knobs, slot).unwrap();
                        assert!(k <= kn.k_max && n <= kn.n_max);
                    }
                }
            }
        }
    }

    #[test]
    fn expansion_knob_is_the_widest_body_input() {
        let g = zoo::by_name("mobilenet_v2", 0.5, 224, None).unwrap();
        let blocks = block_shapes(&g, 224, &BitWidthMap::deployment(&g, 4)).unwrap();
        let scan = blocks[2..18]
            .iter()
            .flat_map(|b| b.ops.iter())
            .filter(|o| o.role == OpRole::PwExpand)
            .map(|o| o.input.c)
            .max()
            .unwrap();
        let p = compile("mobilenet_v2", 0.5, 224, blocks, &CompileOptions::default()).unwrap();
        let body = p.cu(CuKind::Body).unwrap();
        assert_eq!(knob(&body.knobs, Slot::PwExpand).unwrap().n_max, scan);
        assert_ne!(
            knob(&body.knobs, Slot::PwExpand).unwrap().n_max,
            knob(&body.knobs, Slot::PwProject).unwrap().n_max
        );
    }

    #[test]
    fn dsp_proxy_grows_with_alpha_and_full_width_does_not_fit() {
        let est = |a| plan("mobilenet_v2", a, 224, &CompileOptions::default()).resources;
        let r: Vec<ResourceReport> = [0.35, 0.5, 0.75, 1.0].into_iter().map(est).collect();
        for w in r.windows(2) {
            assert!(w[0].multipliers < w[1].multipliers);
        }
        assert!(!r[3].feasible);
    }

    #[test]
    fn dominating_knobs_cost_more() {
        let mut p = plan("mobilenet_v2", 0.5, 128, &CompileOptions::default());
        let before = p.resources.multipliers;
        for cu in &mut p.cus {
            crate::compiler::knobs::scale_lanes(&mut cu.knobs, 2);
        }
        p.refresh_resources();
        assert!(p.resources.multipliers >= before);
    }

    #[test]
    fn body_buffers_follow_the_largest_instance() {
        let p = plan("mobilenet_v2", 1.0, 224, &CompileOptions::default());
        let body = p.cu(CuKind::Body).unwrap();
        let lb = body
            .buffers
            .get(OpRole::Depthwise, crate::compiler::buffers::BufferKind::LineBuffer)
            .unwrap();
        let scan = body
            .invocations
            .iter()
            .flat_map(|&i| p.invocation_ops(i))
            .filter(|o| o.role == OpRole::Depthwise)
            .map(crate::compiler::buffers::line_buffer_bits)
            .max()
            .unwrap();
        assert_eq!(lb, scan);
        // 224x224 residual operands exceed the default budget
        assert_eq!(body.buffers.residual, ResidualPlacement::OffChip);
        let small = plan("mobilenet_v2", 0.5, 96, &CompileOptions::default());
        assert_eq!(small.cu(CuKind::Body).unwrap().buffers.residual, ResidualPlacement::OnChip);
    }

    #[test]
    fn tail_scratchpad_holds_its_weights() {
        let p = plan("mobilenet_v2", 1.0, 224, &CompileOptions::default());
        let tail = p.cu(CuKind::Tail).unwrap();
        let pw = p.invocation_ops(tail.invocations[0]).find(|o| o.role == OpRole::Pointwise).unwrap();
        let sp = tail
            .buffers
            .get(OpRole::Pointwise, crate::compiler::buffers::BufferKind::WeightScratchpad)
            .unwrap();
        assert!(sp >= pw.weight_elems() as u64 * pw.weight_bits as u64);
    }
}
