//! Shape-only view of a network: one `OpShape` per compute operator, grouped
//! into blocks. Counting, partitioning, buffer sizing, tracing and the
//! performance model all work on this view, so they need no weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ir::graph::NetworkGraph;
use crate::ir::layer::{ConvKind, LayerKind};
use crate::ir::tensor::Shape;

/// Role an operator plays inside its block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpRole {
    NormalConv,
    Depthwise,
    /// Pointwise convolution before the depthwise stage of an IRB.
    PwExpand,
    /// Pointwise convolution after the depthwise stage of an IRB.
    PwProject,
    /// Pointwise convolution in a plain (non-IRB) block.
    Pointwise,
    SqueezeExcite,
    AvgPool,
    ResidualAdd,
    Dense,
}

impl OpRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpRole::NormalConv => "normal_conv",
            OpRole::Depthwise => "depthwise",
            OpRole::PwExpand => "pw_expand",
            OpRole::PwProject => "pw_project",
            OpRole::Pointwise => "pointwise",
            OpRole::SqueezeExcite => "squeeze_excite",
            OpRole::AvgPool => "avg_pool",
            OpRole::ResidualAdd => "residual_add",
            OpRole::Dense => "dense",
        }
    }

    pub fn is_pointwise(&self) -> bool {
        matches!(self, OpRole::PwExpand | OpRole::PwProject | OpRole::Pointwise)
    }

    /// Convolutions that stream through a line buffer and sliding window.
    pub fn is_windowed(&self) -> bool {
        matches!(self, OpRole::NormalConv | OpRole::Depthwise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpShape {
    pub name: String,
    pub role: OpRole,
    pub input: Shape,
    pub output: Shape,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    /// Bottleneck width of a squeeze-excite operator, 0 otherwise.
    pub squeeze: usize,
    pub weight_bits: u8,
    pub in_bits: u8,
    pub out_bits: u8,
}

impl OpShape {
    pub fn weight_elems(&self) -> usize {
        match self.role {
            OpRole::NormalConv | OpRole::Depthwise | OpRole::PwExpand | OpRole::PwProject | OpRole::Pointwise => {
                self.output.c * (self.input.c / self.groups) * self.k * self.k
            }
            OpRole::SqueezeExcite => 2 * self.input.c * self.squeeze,
            OpRole::Dense => self.input.c * self.output.c,
            OpRole::AvgPool | OpRole::ResidualAdd => 0,
        }
    }

    pub fn bias_elems(&self) -> usize {
        match self.role {
            OpRole::SqueezeExcite => self.squeeze + self.input.c,
            OpRole::AvgPool | OpRole::ResidualAdd => 0,
            _ => self.output.c,
        }
    }

    pub fn has_params(&self) -> bool {
        self.weight_elems() > 0
    }

    /// Model-size contribution: weights and biases, both at the weight width.
    pub fn param_bits(&self) -> u64 {
        ((self.weight_elems() + self.bias_elems()) * self.weight_bits as usize) as u64
    }

    /// Multiply-accumulate count over the output extent.
    pub fn macs(&self) -> u64 {
        let out = self.output;
        let v = match self.role {
            OpRole::NormalConv | OpRole::Depthwise | OpRole::PwExpand | OpRole::PwProject | OpRole::Pointwise => {
                out.pixels() * self.k * self.k * (self.input.c / self.groups) * out.c
            }
            OpRole::SqueezeExcite => {
                let c = self.input.c;
                c * self.squeeze + self.squeeze * c + self.input.pixels() * c
            }
            OpRole::Dense => self.input.c * self.output.c,
            OpRole::AvgPool | OpRole::ResidualAdd => 0,
        };
        v as u64
    }

    /// Bytes of one streamed feature element on the output side.
    pub fn out_elem_bytes(&self) -> usize {
        if self.role == OpRole::Dense {
            4
        } else {
            1
        }
    }

    pub fn in_bytes(&self) -> usize {
        self.input.len()
    }

    pub fn out_bytes(&self) -> usize {
        self.output.len() * self.out_elem_bytes()
    }

    pub fn padding(&self) -> usize {
        (self.k.max(1) - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockShape {
    pub index: usize,
    pub is_irb: bool,
    pub residual: bool,
    pub input: Shape,
    pub output: Shape,
    pub ops: Vec<OpShape>,
}

impl BlockShape {
    pub fn has_role(&self, role: OpRole) -> bool {
        self.ops.iter().any(|o| o.role == role)
    }

    pub fn param_bits(&self) -> u64 {
        self.ops.iter().map(OpShape::param_bits).sum()
    }

    pub fn macs(&self) -> u64 {
        self.ops.iter().map(OpShape::macs).sum()
    }
}

/// Weight bit-widths per layer, plus the width of the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitWidthMap {
    pub default: u8,
    pub input: u8,
    #[serde(default)]
    pub overrides: BTreeMap<String, u8>,
}

impl BitWidthMap {
    pub fn uniform(bw: u8) -> Self {
        BitWidthMap {
            default: bw,
            input: 8,
            overrides: BTreeMap::new(),
        }
    }

    /// Deployment widths: the first normal convolution at 8 bits, `bw` for
    /// every other layer.
    pub fn deployment(g: &NetworkGraph, bw: u8) -> Self {
        let mut map = BitWidthMap::uniform(bw);
        if let Some(name) = first_conv_name(g) {
            map.overrides.insert(name.to_string(), 8);
        }
        map
    }

    pub fn weight_bits(&self, layer: &str) -> u8 {
        self.overrides.get(layer).copied().unwrap_or(self.default)
    }
}

pub fn first_conv_name(g: &NetworkGraph) -> Option<&str> {
    g.layers()
        .map(|(_, l)| l)
        .find(|l| matches!(&l.kind, LayerKind::Conv(c) if c.kind == ConvKind::Normal))
        .map(|l| l.name.as_str())
}

/// Builds the operator view of `g` at input resolution `resolution`.
///
/// Batch-norm and activation layers carry no separate operator: they fold
/// into the preceding convolution.
pub fn block_shapes(g: &NetworkGraph, resolution: usize, bw: &BitWidthMap) -> Result<Vec<BlockShape>> {
    let ios = g.propagate(resolution)?;
    let mut blocks = Vec::with_capacity(g.blocks.len());
    let mut first_op = true;
    for (bi, (block, block_ios)) in g.blocks.iter().zip(&ios).enumerate() {
        let is_irb = block.is_irb();
        let mut seen_dw = false;
        let mut ops = Vec::new();
        for (layer, io) in block.layers.iter().zip(block_ios) {
            let in_bits = if first_op { bw.input } else { bw.default };
            let mut op = OpShape {
                name: layer.name.clone(),
                role: OpRole::AvgPool,
                input: io.input,
                output: io.output,
                k: 1,
                stride: 1,
                groups: 1,
                squeeze: 0,
                weight_bits: bw.weight_bits(&layer.name),
                in_bits,
                out_bits: bw.default,
            };
            match &layer.kind {
                LayerKind::Conv(c) => {
                    op.role = match c.kind {
                        ConvKind::Normal => OpRole::NormalConv,
                        ConvKind::Depthwise => {
                            seen_dw = true;
                            OpRole::Depthwise
                        }
                        ConvKind::Pointwise if !is_irb => OpRole::Pointwise,
                        ConvKind::Pointwise if seen_dw => OpRole::PwProject,
                        ConvKind::Pointwise => OpRole::PwExpand,
                    };
                    op.k = c.k;
                    op.stride = c.stride;
                    op.groups = c.groups;
                }
                LayerKind::SqueezeExcite(se) => {
                    op.role = OpRole::SqueezeExcite;
                    op.squeeze = se.squeeze_width();
                }
                LayerKind::AvgPool => op.role = OpRole::AvgPool,
                LayerKind::ResidualAdd => op.role = OpRole::ResidualAdd,
                LayerKind::Dense(_) => {
                    op.role = OpRole::Dense;
                    op.out_bits = 32;
                }
                LayerKind::BatchNorm(_) | LayerKind::Relu6 | LayerKind::HardSigmoid => continue,
            }
            first_op = false;
            if !op.has_params() {
                op.weight_bits = 0;
            }
            ops.push(op);
        }
        let input = block_ios.first().map(|io| io.input).unwrap_or_else(|| g.input_shape_at(resolution));
        let output = block_ios.last().map(|io| io.output).unwrap_or(input);
        blocks.push(BlockShape {
            index: bi,
            is_irb,
            residual: block.has_residual(),
            input,
            output,
            ops,
        });
    }
    Ok(blocks)
}
