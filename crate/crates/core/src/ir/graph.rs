//! The network graph: an ordered chain of blocks, each block an ordered
//! chain of layers.

use crate::error::{Error, Result};
use crate::ir::layer::{ConvKind, Layer, LayerKind};
use crate::ir::tensor::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub layers: Vec<Layer>,
}

impl Block {
    pub fn new(layers: Vec<Layer>) -> Self {
        Block { layers }
    }

    /// An inverted residual block is any block built around a depthwise
    /// convolution.
    pub fn is_irb(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(&l.kind, LayerKind::Conv(c) if c.kind == ConvKind::Depthwise))
    }

    pub fn has_residual(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::ResidualAdd))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub arch_name: String,
    pub alpha: f64,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub blocks: Vec<Block>,
}

/// Input and output shape of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIo {
    pub input: Shape,
    pub output: Shape,
}

pub(crate) fn conv_out_dim(dim: usize, stride: usize) -> usize {
    dim.div_ceil(stride)
}

impl NetworkGraph {
    pub fn input_shape(&self) -> Shape {
        self.input_shape_at(self.input_resolution)
    }

    pub fn input_shape_at(&self, resolution: usize) -> Shape {
        Shape::new(self.input_channels, resolution, resolution)
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, blk)| blk.layers.iter().map(move |l| (b, l)))
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layers.len()).sum()
    }

    pub fn has_params(&self) -> bool {
        self.layers().all(|(_, l)| l.has_params())
    }

    pub fn strip_params(&mut self) {
        for b in &mut self.blocks {
            for l in &mut b.layers {
                l.strip_params();
            }
        }
    }

    /// Propagates shapes through every layer at the given input resolution,
    /// checking channel chaining on every edge.
    pub fn propagate(&self, resolution: usize) -> Result<Vec<Vec<LayerIo>>> {
        let mut cur = self.input_shape_at(resolution);
        let mut out = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let block_in = cur;
            let mut ios = Vec::with_capacity(block.layers.len());
            for layer in &block.layers {
                let next = layer_output(layer, cur, block_in).map_err(|e| match e {
                    Error::InvalidGraph(m) => {
                        Error::InvalidGraph(format!("block {bi}, layer {}: {m}", layer.name))
                    }
                    other => other,
                })?;
                ios.push(LayerIo {
                    input: cur,
                    output: next,
                });
                cur = next;
            }
            out.push(ios);
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Shape> {
        let ios = self.propagate(self.input_resolution)?;
        Ok(ios
            .iter()
            .flatten()
            .last()
            .map(|io| io.output)
            .unwrap_or_else(|| self.input_shape()))
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<()> {
        if self.num_layers() == 0 {
            return Err(Error::InvalidGraph("no layers".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidGraph(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if self.input_resolution == 0 || self.input_channels == 0 {
            return Err(Error::InvalidGraph("empty input shape".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            if block.layers.is_empty() {
                return Err(Error::InvalidGraph(format!("block {bi} is empty")));
            }
            for layer in &block.layers {
                if !names.insert(layer.name.as_str()) {
                    return Err(Error::InvalidGraph(format!(
                        "duplicate layer name {}",
                        layer.name
                    )));
                }
                match &layer.kind {
                    LayerKind::Conv(c) => c.validate(&layer.name)?,
                    LayerKind::BatchNorm(b) => b.validate(&layer.name)?,
                    LayerKind::SqueezeExcite(se) => se.validate(&layer.name)?,
                    LayerKind::Dense(d) => d.validate(&layer.name)?,
                    _ => {}
                }
            }
        }
        self.propagate(self.input_resolution)?;
        Ok(())
    }

    pub fn find_layer(&self, name: &str) -> Option<&Layer> {
        self.layers().map(|(_, l)| l).find(|l| l.name == name)
    }
}

fn layer_output(layer: &Layer, cur: Shape, block_in: Shape) -> Result<Shape> {
    let mismatch = |expected: usize| {
        Err(Error::InvalidGraph(format!(
            "expects {expected} input channels but producer yields {}",
            cur.c
        )))
    };
    Ok(match &layer.kind {
        LayerKind::Conv(c) => {
            if c.n != cur.c {
                return mismatch(c.n);
            }
            Shape::new(
                c.m,
                conv_out_dim(cur.h, c.stride),
                conv_out_dim(cur.w, c.stride),
            )
        }
        LayerKind::BatchNorm(b) => {
            if b.channels != cur.c {
                return mismatch(b.channels);
            }
            cur
        }
        LayerKind::Relu6 | LayerKind::HardSigmoid => cur,
        LayerKind::AvgPool => Shape::new(cur.c, 1, 1),
        LayerKind::ResidualAdd => {
            if block_in != cur {
                return Err(Error::InvalidGraph(format!(
                    "residual add needs equal shapes, block input {block_in} vs {cur}"
                )));
            }
            cur
        }
        LayerKind::SqueezeExcite(se) => {
            if se.channels() != cur.c {
                return mismatch(se.channels());
            }
            cur
        }
        LayerKind::Dense(d) => {
            if cur.h != 1 || cur.w != 1 {
                return Err(Error::InvalidGraph(format!(
                    "dense layer needs a pooled 1x1 input, got {cur}"
                )));
            }
            if d.n != cur.c {
                return mismatch(d.n);
            }
            Shape::new(d.m, 1, 1)
        }
    })
}
