//! Builds the fused stage chain for a run of quantized blocks.
//!
//! Wire format: every stream carries pixel-major elements (for each row,
//! for each column, all channels of that pixel). Normal convolution output
//! is therefore emitted one full pixel at a time, which is exactly the
//! quantum the next depthwise or pointwise stage consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::layer::ConvKind;
use crate::ir::tensor::{Shape, Tensor};
use crate::kernel::conv::{PointwiseStage, WindowConvStage};
use crate::kernel::ops::{AvgPoolStage, DenseStage, ResidualStage, SkipBuffer, SqueezeExciteStage, TeeStage};
use crate::kernel::stream::{run_round_robin, run_threaded, RunOutput, Stage};
use crate::quant::qnet::{QBlock, QConv, QOp};

/// Where a block's residual operand is held while the block computes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipSource {
    /// Copied off the stream at block entry into an on-chip buffer.
    OnChip,
    /// Re-read from the block input in DDR.
    OffChip(Vec<i32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Driver {
    #[default]
    RoundRobin,
    Threaded,
}

/// Pointwise lane parallelism for a layer; `None` means one lane per
/// input channel.
pub type ParallelismFn<'a> = &'a dyn Fn(&QConv) -> Option<usize>;

/// Stage chain for `blocks` fed with a tensor of `input` shape.
/// `skips[i]` says where block `i`'s residual operand lives; only the
/// first block may use [`SkipSource::OffChip`].
pub fn build_stages(
    blocks: &[&QBlock],
    input: Shape,
    skips: &[SkipSource],
    parallelism: ParallelismFn<'_>,
) -> Result<(Vec<Box<dyn Stage>>, Shape)> {
    let mut stages: Vec<Box<dyn Stage>> = Vec::new();
    let mut cur = input;
    for (bi, block) in blocks.iter().enumerate() {
        let block_in = cur;
        let mut skip = None;
        if block.ops.iter().any(|o| matches!(o, QOp::ResidualAdd(_))) {
            let buf = match skips.get(bi) {
                Some(SkipSource::OffChip(data)) => {
                    if bi != 0 {
                        return Err(Error::Runtime(
                            "an off-chip residual must start its invocation (its input is in DDR)".into(),
                        ));
                    }
                    if data.len() != block_in.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "off-chip residual holds {} elements, block input is {block_in}",
                            data.len()
                        )));
                    }
                    SkipBuffer::prefilled(data)
                }
                _ => {
                    let buf = SkipBuffer::new();
                    stages.push(Box::new(TeeStage::new(
                        format!("{}.tee", block.ops[0].name()),
                        block_in.c,
                        block_in.len(),
                        buf.clone(),
                    )));
                    buf
                }
            };
            skip = Some(buf);
        }
        for op in &block.ops {
            match op {
                QOp::Conv(c) => {
                    if c.n != cur.c {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: expects {} channels, stream carries {cur}",
                            c.name, c.n
                        )));
                    }
                    if c.kind == ConvKind::Pointwise {
                        let p = parallelism(c).unwrap_or(c.n).max(1);
                        stages.push(Box::new(PointwiseStage::new(c.clone(), cur.pixels(), p)?));
                        cur = Shape::new(c.m, cur.h, cur.w);
                    } else {
                        let s = WindowConvStage::new(c.clone(), cur.h, cur.w)?;
                        let (ho, wo) = s.out_dims();
                        stages.push(Box::new(s));
                        cur = Shape::new(c.m, ho, wo);
                    }
                }
                QOp::AvgPool(p) => {
                    stages.push(Box::new(AvgPoolStage::new(p.name.clone(), cur.c, cur.pixels())));
                    cur = Shape::new(cur.c, 1, 1);
                }
                QOp::SqueezeExcite(se) => {
                    if se.channels != cur.c {
                        return Err(Error::ShapeMismatch(format!("{}: channel mismatch", se.name)));
                    }
                    stages.push(Box::new(SqueezeExciteStage::new(se.clone(), cur.pixels())));
                }
                QOp::ResidualAdd(r) => {
                    if cur != block_in {
                        return Err(Error::ShapeMismatch(format!("{}: {cur} vs {block_in}", r.name)));
                    }
                    let buf = skip.clone().expect("skip set for residual blocks");
                    stages.push(Box::new(ResidualStage::new(r.clone(), cur.c, cur.len(), buf)));
                }
                QOp::Dense(d) => {
                    if d.n != cur.len() {
                        return Err(Error::ShapeMismatch(format!("{}: input {cur}", d.name)));
                    }
                    stages.push(Box::new(DenseStage::new(d.clone())));
                    cur = Shape::new(d.m, 1, 1);
                }
            }
        }
    }
    Ok((stages, cur))
}

/// Default FIFO depth: one output row of the widest stage, never below
/// the largest quantum.
pub fn default_depth(stages: &[Box<dyn Stage>], input: Shape) -> usize {
    let row = input.w * input.c;
    let quantum = stages.iter().map(|s| s.quantum()).max().unwrap_or(1);
    row.max(quantum).max(1)
}

pub fn run_stages(stages: &mut [Box<dyn Stage>], input: &[i32], depth: usize, driver: Driver, trace: bool) -> Result<RunOutput> {
    match driver {
        Driver::RoundRobin => run_round_robin(stages, input, depth, trace),
        Driver::Threaded => run_threaded(stages, input, depth),
    }
}

/// Streams a whole QNet block by block, each block fused on its own, and
/// returns the final stream (logits for a classifier network).
pub fn stream_network(q: &crate::quant::qnet::QNet, input: &Tensor<i32>, driver: Driver) -> Result<Vec<i32>> {
    let mut cur_shape = input.shape();
    let mut data = input.to_pixel_major();
    for block in &q.blocks {
        let (mut stages, out) = build_stages(&[block], cur_shape, &[SkipSource::OnChip], &|_| None)?;
        let depth = default_depth(&stages, out).max(default_depth(&stages, cur_shape));
        data = run_stages(&mut stages, &data, depth, driver, false)?.output;
        cur_shape = out;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo;
    use crate::kernel::reference::qnet_ref;
    use crate::kernel::synth;
    use crate::quant::bn::fuse_graph;
    use crate::quant::calibrate::{calibrate, random_dataset};
    use crate::quant::qnet::{quantize_network, QNet, QuantConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qnet(arch: &str, res: usize) -> QNet {
        let g = fuse_graph(&zoo::by_name(arch, 1.0, res, Some(7)).unwrap()).unwrap();
        let stats = calibrate(&g, &random_dataset(g.input_shape(), 4, 3)).unwrap();
        quantize_network(&g, &stats, &QuantConfig::default()).unwrap()
    }

    fn input(q: &QNet, seed: u64) -> Tensor<i32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth::tensor(&mut rng, q.input_shape(), q.input_spec.bw)
    }

    #[test]
    fn toy_stream_matches_reference_with_both_drivers() {
        let q = qnet("toy", 16);
        for seed in 0..3 {
            let x = input(&q, seed);
            let want = qnet_ref(&q, &x).unwrap();
            assert_eq!(want.len(), 10);
            assert_eq!(stream_network(&q, &x, Driver::RoundRobin).unwrap(), want);
            assert_eq!(stream_network(&q, &x, Driver::Threaded).unwrap(), want);
        }
    }

    #[test]
    fn efficientnet_stream_matches_reference() {
        let q = qnet("efficientnet_compressed", 32);
        let x = input(&q, 1);
        assert_eq!(stream_network(&q, &x, Driver::Threaded).unwrap(), qnet_ref(&q, &x).unwrap());
    }

    #[test]
    fn fused_chain_equals_blockwise_and_skip_sources_agree() {
        let q = qnet("toy", 16);
        let x = input(&q, 9);
        let blocks: Vec<&QBlock> = q.blocks.iter().collect();
        let want = qnet_ref(&q, &x).unwrap();
        let (mut stages, out) = build_stages(&blocks, x.shape(), &[], &|_| Some(2)).unwrap();
        assert_eq!(out.c, 10);
        let depth = default_depth(&stages, x.shape()) * 8;
        let rr = run_stages(&mut stages, &x.to_pixel_major(), depth, Driver::RoundRobin, false).unwrap();
        assert_eq!(rr.output, want);

        // residual block alone, operand held on-chip vs re-read from DDR
        let b0 = run_stages(
            &mut build_stages(&blocks[..1], x.shape(), &[], &|_| None).unwrap().0,
            &x.to_pixel_major(),
            depth,
            Driver::RoundRobin,
            false,
        )
        .unwrap()
        .output;
        let shape1 = q.block_shapes().unwrap()[1].input;
        let run1 = |skip: SkipSource| {
            let (mut st, _) = build_stages(&blocks[1..2], shape1, &[skip], &|_| None).unwrap();
            run_stages(&mut st, &b0, depth, Driver::Threaded, false).unwrap()
        };
        let on = run1(SkipSource::OnChip);
        let off = run1(SkipSource::OffChip(b0.clone()));
        assert_eq!(on.output, off.output);
        // the tee adds one stream transfer of the block input
        assert_eq!(on.stats.transfers.len(), off.stats.transfers.len() + 1);
    }

    #[test]
    fn off_chip_skip_only_at_invocation_start() {
        let q = qnet("toy", 16);
        let blocks: Vec<&QBlock> = q.blocks.iter().collect();
        let skips = [SkipSource::OnChip, SkipSource::OffChip(vec![0; 8 * 8 * 8])];
        let err = build_stages(&blocks[..2], q.input_shape(), &skips, &|_| None).err().unwrap();
        assert!(matches!(err, Error::Runtime(_)));
        let bad = [SkipSource::OnChip, SkipSource::OffChip(vec![0; 3])];
        let shape1 = q.block_shapes().unwrap()[1].input;
        assert!(build_stages(&blocks[1..2], shape1, &bad[1..], &|_| None).is_err());
    }
}
