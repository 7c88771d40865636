//! On-chip buffer table of a compute unit. Each entry is sized for the
//! largest requirement over every operator instance mapped to the unit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::shape::{BlockShape, OpRole, OpShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    LineBuffer,
    WeightScratchpad,
    Fifo,
    SeBuffer,
    ResidualBuffer,
}

impl BufferKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BufferKind::LineBuffer => "line_buffer",
            BufferKind::WeightScratchpad => "weight_scratchpad",
            BufferKind::Fifo => "fifo",
            BufferKind::SeBuffer => "se_buffer",
            BufferKind::ResidualBuffer => "residual_buffer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub role: OpRole,
    pub kind: BufferKind,
    pub bits: u64,
}

/// Where residual operands live while their block computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPlacement {
    None,
    /// Held in an on-chip buffer filled as the block input streams in.
    OnChip,
    /// Re-read from the block input in DDR.
    OffChip,
}

/// `K · W · N · BW` for one streaming convolution (unpadded input width).
pub fn line_buffer_bits(op: &OpShape) -> u64 {
    (op.k * op.input.w * op.input.c) as u64 * op.in_bits as u64
}

/// Resident weights plus 32-bit biases.
pub fn scratchpad_bits(op: &OpShape) -> u64 {
    op.weight_elems() as u64 * op.weight_bits as u64 + op.bias_elems() as u64 * 32
}

/// FIFO after `op`: `depth` elements, or one output row by default.
pub fn fifo_bits(op: &OpShape, depth: Option<usize>) -> u64 {
    let elems = depth.unwrap_or(op.output.w * op.output.c);
    let bits = if op.role == OpRole::Dense { 32 } else { op.out_bits as u64 };
    elems as u64 * bits
}

pub fn residual_bits(b: &BlockShape) -> u64 {
    b.input.len() as u64 * b.ops.first().map_or(8, |o| o.in_bits) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferTable {
    pub entries: Vec<BufferEntry>,
    pub residual: ResidualPlacement,
    /// Largest residual operand, whether or not it is held on chip.
    pub residual_operand_bits: u64,
}

impl BufferTable {
    pub fn total_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.bits).sum()
    }

    pub fn get(&self, role: OpRole, kind: BufferKind) -> Option<u64> {
        self.entries.iter().find(|e| e.role == role && e.kind == kind).map(|e| e.bits)
    }
}

pub fn size_buffers(blocks: &[&BlockShape], fifo_depth: Option<usize>, residual_budget_bits: u64) -> BufferTable {
    let mut table: BTreeMap<(OpRole, BufferKind), u64> = BTreeMap::new();
    let mut put = |role, kind, bits: u64| {
        let e = table.entry((role, kind)).or_insert(0);
        *e = (*e).max(bits);
    };
    for b in blocks {
        for op in &b.ops {
            if op.role.is_windowed() {
                put(op.role, BufferKind::LineBuffer, line_buffer_bits(op));
            }
            if op.has_params() {
                put(op.role, BufferKind::WeightScratchpad, scratchpad_bits(op));
            }
            if op.role == OpRole::SqueezeExcite {
                put(op.role, BufferKind::SeBuffer, op.input.len() as u64 * op.in_bits as u64);
            }
            put(op.role, BufferKind::Fifo, fifo_bits(op, fifo_depth));
        }
    }
    let residual_operand_bits = blocks.iter().filter(|b| b.residual).map(|b| residual_bits(b)).max().unwrap_or(0);
    let residual = if !blocks.iter().any(|b| b.residual) {
        ResidualPlacement::None
    } else if residual_operand_bits <= residual_budget_bits {
        table.insert((OpRole::ResidualAdd, BufferKind::ResidualBuffer), residual_operand_bits);
        ResidualPlacement::OnChip
    } else {
        ResidualPlacement::OffChip
    };
    BufferTable {
        entries: table
            .into_iter()
            .map(|((role, kind), bits)| BufferEntry { role, kind, bits })
            .collect(),
        residual,
        residual_operand_bits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::tensor::Shape;

    fn dw(n: usize, h: usize) -> OpShape {
        OpShape {
            name: "dw".into(),
            role: OpRole::Depthwise,
            input: Shape::new(n, h, h),
            output: Shape::new(n, h, h),
            k: 3,
            stride: 1,
            groups: n,
            squeeze: 0,
            weight_bits: 4,
            in_bits: 4,
            out_bits: 4,
        }
    }

    fn block(op: OpShape, residual: bool) -> BlockShape {
        BlockShape {
            index: 0,
            is_irb: true,
            residual,
            input: op.input,
            output: op.output,
            ops: vec![op],
        }
    }

    #[test]
    fn line_buffer_product() {
        assert_eq!(line_buffer_bits(&dw(4, 8)), 384);
    }

    #[test]
    fn table_takes_the_maximum_instance() {
        // large map with few channels vs small map with many
        let a = block(dw(8, 32), true);
        let b = block(dw(64, 4), true);
        let t = size_buffers(&[&a, &b], None, 1 << 20);
        assert_eq!(t.get(OpRole::Depthwise, BufferKind::LineBuffer), Some(3 * 32 * 8 * 4));
        assert_eq!(t.get(OpRole::Depthwise, BufferKind::WeightScratchpad), Some(64 * 9 * 4 + 64 * 32));
        assert_eq!(t.residual, ResidualPlacement::OnChip);
        assert_eq!(t.get(OpRole::ResidualAdd, BufferKind::ResidualBuffer), Some(8 * 32 * 32 * 4));
    }

    #[test]
    fn residual_over_budget_goes_off_chip() {
        let a = block(dw(8, 32), true);
        let t = size_buffers(&[&a], Some(16), 1000);
        assert_eq!(t.residual, ResidualPlacement::OffChip);
        assert_eq!(t.get(OpRole::ResidualAdd, BufferKind::ResidualBuffer), None);
        assert_eq!(t.get(OpRole::Depthwise, BufferKind::Fifo), Some(64));
        let t = size_buffers(&[&block(dw(8, 32), false)], None, 0);
        assert_eq!(t.residual, ResidualPlacement::None);
    }
}
