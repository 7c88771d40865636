//! Host schedule and shared-memory layout.
//!
//! Invocations run in order (Head, Body×j, Tail, Classifier). Parameters
//! sit in their own regions for the whole run; feature maps ping-pong
//! between two buffers, invocation `i` reading buffer `i mod 2` and
//! writing the other. The host passes region offsets, never copies.

use serde::{Deserialize, Serialize};

use crate::compiler::buffers::ResidualPlacement;
use crate::compiler::codec::region_sizes;
use crate::compiler::partition::CuKind;
use crate::compiler::plan::HardwarePlan;
use crate::error::{Error, Result};
use crate::ir::shape::{BlockShape, OpShape};
use crate::ir::tensor::Shape;

pub const REGION_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Weights,
    Bias,
    QuantParams,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub kind: RegionKind,
    pub offset: usize,
    pub len: usize,
    /// First and last invocation during which the region holds live data.
    pub live: [usize; 2],
}

impl Region {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    fn overlaps(&self, o: &Region) -> bool {
        let space = self.offset < o.end() && o.offset < self.end();
        let time = self.live[0] <= o.live[1] && o.live[0] <= self.live[1];
        space && time
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub regions: Vec<Region>,
    pub total_bytes: usize,
}

impl MemoryLayout {
    /// Fails if two simultaneously live regions share bytes.
    pub fn check(&self) -> Result<()> {
        for (i, a) in self.regions.iter().enumerate() {
            if a.end() > self.total_bytes {
                return Err(Error::Compile(format!("region {} ends past the image", a.name)));
            }
            for b in &self.regions[i + 1..] {
                if a.len > 0 && b.len > 0 && a.overlaps(b) {
                    return Err(Error::Compile(format!("live regions {} and {} overlap", a.name, b.name)));
                }
            }
        }
        Ok(())
    }

    pub fn region(&self, index: usize) -> &Region {
        &self.regions[index]
    }
}

/// Region indices holding one operator's parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpParams {
    pub op: String,
    pub weights: Option<usize>,
    pub bias: Option<usize>,
    pub quant: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationSchedule {
    pub index: usize,
    pub cu: CuKind,
    pub blocks: Vec<BlockShape>,
    pub input: Shape,
    pub output: Shape,
    /// Bytes per output element: 4 for raw logits, 1 otherwise.
    pub out_elem_bytes: usize,
    pub input_region: usize,
    pub output_region: usize,
    pub residual: ResidualPlacement,
    pub params: Vec<OpParams>,
    /// Pointwise lane parallelism per operator name.
    pub lanes: Vec<(String, usize)>,
}

impl InvocationSchedule {
    pub fn input_bytes(&self) -> usize {
        self.input.len()
    }

    pub fn output_bytes(&self) -> usize {
        self.output.len() * self.out_elem_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub arch: String,
    pub input: Shape,
    pub invocations: Vec<InvocationSchedule>,
    /// Trailing blocks left unmapped, run by the host after the last
    /// invocation.
    pub host_blocks: Vec<HostBlock>,
    pub layout: MemoryLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostBlock {
    pub block: BlockShape,
    pub params: Vec<OpParams>,
}

impl Schedule {
    /// Shape of the last invocation's output.
    pub fn output(&self) -> Shape {
        self.invocations.last().map_or(self.input, |i| i.output)
    }

    /// Shape handed back to the caller after host blocks ran.
    pub fn final_output(&self) -> Shape {
        self.host_blocks.last().map_or(self.output(), |b| b.block.output)
    }

    /// Feature buffer the network input is written to.
    pub fn input_region(&self) -> usize {
        self.invocations.first().map_or(0, |i| i.input_region)
    }

    pub fn output_region(&self) -> usize {
        self.invocations.last().map_or(0, |i| i.output_region)
    }
}

fn align(v: usize) -> usize {
    v.div_ceil(REGION_ALIGN) * REGION_ALIGN
}

pub fn emit_schedule(plan: &HardwarePlan) -> Result<Schedule> {
    let n_inv = plan.invocations.len();
    let last = n_inv.saturating_sub(1);
    let mut regions = Vec::new();
    let mut offset = 0usize;
    let mut add = |name: String, kind, len: usize, live: [usize; 2]| -> usize {
        regions.push(Region {
            name,
            kind,
            offset,
            len,
            live,
        });
        offset += align(len);
        regions.len() - 1
    };

    let mut op_params = |op: &OpShape| {
        let (w, b, q) = region_sizes(op);
        let mut region = |suffix: &str, kind, len| (len > 0).then(|| add(format!("{}.{suffix}", op.name), kind, len, [0, last]));
        OpParams {
            op: op.name.clone(),
            weights: region("weights", RegionKind::Weights, w),
            bias: region("bias", RegionKind::Bias, b),
            quant: region("quant", RegionKind::QuantParams, q),
        }
    };
    let per_inv_params: Vec<Vec<OpParams>> = plan
        .invocations
        .iter()
        .map(|inv| plan.invocation_ops(inv.index).map(&mut op_params).collect())
        .collect();
    let mapped_end = plan.invocations.last().map_or(0, |i| i.blocks.last().map_or(0, |b| b + 1));
    let host_blocks: Vec<HostBlock> = plan.blocks[mapped_end..]
        .iter()
        .map(|b| HostBlock {
            block: b.clone(),
            params: b.ops.iter().map(&mut op_params).collect(),
        })
        .collect();

    let first_in = plan
        .invocations
        .first()
        .map(|i| plan.blocks[i.blocks[0]].input.len())
        .unwrap_or(0);
    let feature_bytes = plan
        .invocations
        .iter()
        .map(|inv| {
            let out = plan.blocks[*inv.blocks.last().expect("non-empty")].output.len();
            let wide = plan.invocation_ops(inv.index).last().map_or(1, |o| o.out_elem_bytes());
            out * wide
        })
        .max()
        .unwrap_or(0)
        .max(first_in);
    let ping = add("feature.a".into(), RegionKind::Feature, feature_bytes, [0, n_inv]);
    let pong = add("feature.b".into(), RegionKind::Feature, feature_bytes, [0, n_inv]);

    let mut invocations = Vec::with_capacity(n_inv);
    for (inv, params) in plan.invocations.iter().zip(per_inv_params) {
        let blocks: Vec<BlockShape> = inv.blocks.iter().map(|&b| plan.blocks[b].clone()).collect();
        let cu = plan.cu(inv.cu).expect("every invocation has its unit");
        let lanes = blocks
            .iter()
            .flat_map(|b| b.ops.iter())
            .filter_map(|op| {
                crate::compiler::knobs::slot_uses(op)
                    .first()
                    .filter(|_| op.role.is_pointwise())
                    .and_then(|(slot, ..)| crate::compiler::knobs::knob(&cu.knobs, *slot))
                    .map(|k| (op.name.clone(), k.lanes))
            })
            .collect();
        let last_op = blocks.last().and_then(|b| b.ops.last()).expect("non-empty block");
        let (input_region, output_region) = if inv.index % 2 == 0 { (ping, pong) } else { (pong, ping) };
        invocations.push(InvocationSchedule {
            index: inv.index,
            cu: inv.cu,
            input: blocks[0].input,
            output: blocks.last().expect("non-empty").output,
            out_elem_bytes: last_op.out_elem_bytes(),
            input_region,
            output_region,
            residual: if blocks.iter().any(|b| b.residual) {
                cu.buffers.residual
            } else {
                ResidualPlacement::None
            },
            params,
            lanes,
            blocks,
        });
    }
    let layout = MemoryLayout {
        total_bytes: offset,
        regions,
    };
    layout.check()?;
    Ok(Schedule {
        arch: plan.arch.clone(),
        input: invocations.first().map_or(Shape::new(0, 0, 0), |i| i.input),
        invocations,
        host_blocks,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::plan::{compile, CompileOptions};
    use crate::ir::shape::{block_shapes, BitWidthMap};
    use crate::ir::zoo;

    fn schedule(arch: &str, alpha: f64, res: usize, map_classifier: bool) -> (HardwarePlan, Schedule) {
        let g = zoo::by_name(arch, alpha, res, None).unwrap();
        let blocks = block_shapes(&g, res, &BitWidthMap::deployment(&g, 4)).unwrap();
        let opts = CompileOptions {
            map_classifier,
            ..CompileOptions::default()
        };
        let p = compile(arch, alpha, res, blocks, &opts).unwrap();
        let s = emit_schedule(&p).unwrap();
        (p, s)
    }

    #[test]
    fn invocation_counts() {
        assert_eq!(schedule("mobilenet_v2", 1.0, 224, true).1.invocations.len(), 19);
        assert_eq!(schedule("efficientnet_compressed", 1.0, 128, false).1.invocations.len(), 11);
        assert_eq!(schedule("toy", 1.0, 16, true).1.invocations.len(), 4);
    }

    #[test]
    fn params_reproduce_block_shapes() {
        let (p, s) = schedule("mobilenet_v2", 0.5, 96, true);
        for (inv, sched) in p.invocations.iter().zip(&s.invocations) {
            let want: Vec<&BlockShape> = inv.blocks.iter().map(|&b| &p.blocks[b]).collect();
            assert_eq!(sched.blocks.iter().collect::<Vec<_>>(), want);
            assert_eq!(sched.input, want[0].input);
        }
        // consecutive invocations chain through the ping-pong buffers
        for w in s.invocations.windows(2) {
            assert_eq!(w[0].output_region, w[1].input_region);
            assert_eq!(w[0].output, w[1].input);
        }
    }

    #[test]
    fn layout_is_sound_and_sized() {
        let (p, s) = schedule("mobilenet_v2", 1.0, 224, true);
        s.layout.check().unwrap();
        let param_bytes: usize = s
            .layout
            .regions
            .iter()
            .filter(|r| r.kind == RegionKind::Weights)
            .map(|r| r.len)
            .sum();
        let bits: u64 = p.blocks.iter().flat_map(|b| b.ops.iter()).map(|o| (o.weight_elems() * o.weight_bits as usize) as u64).sum();
        assert!(param_bytes as u64 * 8 >= bits);
        let fa = &s.layout.regions[s.input_region()];
        assert!(fa.len >= 3 * 224 * 224);
    }

    #[test]
    fn overlapping_live_regions_are_caught() {
        let mut layout = schedule("toy", 1.0, 16, true).1.layout;
        layout.regions[1].offset = layout.regions[0].offset;
        assert!(layout.check().is_err());
        // same bytes at disjoint times are fine
        let mut l2 = layout.clone();
        l2.regions[0].live = [0, 0];
        l2.regions[1].live = [1, 1];
        l2.check().unwrap();
    }

    #[test]
    fn unmapped_classifier_runs_on_the_host() {
        let (p, s) = schedule("mobilenet_v2", 0.35, 96, false);
        assert_eq!(s.invocations.len(), 18);
        assert_eq!(s.host_blocks.len(), 1);
        assert_eq!(s.host_blocks[0].block, *p.blocks.last().unwrap());
        assert!(s.host_blocks[0].params[0].weights.is_some());
        assert_eq!(s.final_output().c, 1000);
        assert!(schedule("efficientnet_compressed", 1.0, 128, false).1.host_blocks.is_empty());
        s.layout.check().unwrap();
    }

    #[test]
    fn classifier_outputs_four_byte_logits() {
        let (_, s) = schedule("toy", 1.0, 16, true);
        let last = s.invocations.last().unwrap();
        assert_eq!(last.cu, CuKind::Classifier);
        assert_eq!(last.output_bytes(), 40);
    }
}
