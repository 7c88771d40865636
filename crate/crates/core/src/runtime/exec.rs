//! Scheduled inference: the host walks the invocation list, each compute
//! unit bursts its parameters from DDR, decodes them and streams its input
//! through the fused stage chain, then writes its output back.

use std::collections::HashMap;

use crate::compiler::buffers::ResidualPlacement;
use crate::compiler::codec::decode;
use crate::compiler::plan::HardwarePlan;
use crate::compiler::schedule::{InvocationSchedule, OpParams, Schedule};
use crate::error::{Error, Result};
use crate::ir::shape::OpShape;
use crate::ir::tensor::{Shape, Tensor};
use crate::kernel::pipeline::{build_stages, default_depth, run_stages, Driver, SkipSource};
use crate::kernel::reference::{avg_pool_ref, dense_ref, qconv_ref, residual_ref, se_ref};
use crate::quant::qnet::{QBlock, QOp};
use crate::runtime::memory::{bytes_to_features, bytes_to_logits, features_to_bytes, logits_to_bytes, SharedMemoryImage};
use crate::runtime::perf::{estimate_performance, PerfEstimate, PerfParams};
use crate::runtime::trace::{Direction, TensorRole, TransactionTrace, TransferKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub driver: Driver,
    /// FIFO depth in elements; `None` uses one output row per channel.
    pub fifo_depth: Option<usize>,
    pub perf: PerfParams,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            driver: Driver::RoundRobin,
            fifo_depth: None,
            perf: PerfParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    /// Final tensor in pixel-major order; raw logits for a classifier.
    pub output: Vec<i32>,
    pub output_shape: Shape,
    pub argmax: usize,
    /// Softmax over the dequantized outputs.
    pub confidences: Vec<f64>,
    pub trace: TransactionTrace,
    pub perf: PerfEstimate,
}

fn check_consistent(plan: &HardwarePlan, schedule: &Schedule) -> Result<()> {
    if plan.invocations.len() != schedule.invocations.len() {
        return Err(Error::Runtime(format!(
            "plan has {} invocations, schedule {}",
            plan.invocations.len(),
            schedule.invocations.len()
        )));
    }
    for (p, s) in plan.invocations.iter().zip(&schedule.invocations) {
        let same = p.cu == s.cu
            && p.blocks.len() == s.blocks.len()
            && p.blocks.iter().zip(&s.blocks).all(|(&b, sb)| plan.blocks[b] == *sb);
        if !same {
            return Err(Error::Runtime(format!("invocation {}: schedule does not match the plan", p.index)));
        }
    }
    Ok(())
}

/// Bursts one operator's parameters and rebuilds it.
fn fetch_op(mem: &mut SharedMemoryImage, shape: &OpShape, p: &OpParams, inv: usize, trace: Option<&mut TransactionTrace>) -> Result<QOp> {
    if p.op != shape.name {
        return Err(Error::Runtime(format!("parameter regions of {} used for {}", p.op, shape.name)));
    }
    let w = mem.read_param(p.weights)?;
    let b = mem.read_param(p.bias)?;
    let q = mem.read_param(p.quant)?;
    if let Some(t) = trace {
        for (region, role, len) in [
            (p.weights, TensorRole::Weights, w.len()),
            (p.bias, TensorRole::Bias, b.len()),
            (p.quant, TensorRole::QuantParams, q.len()),
        ] {
            if region.is_some() {
                t.push(inv, TransferKind::Burst, Direction::Read, role, &p.op, len as u64);
            }
        }
    }
    decode(shape, &w, &b, &q)
}

fn run_invocation(
    mem: &mut SharedMemoryImage,
    inv: &InvocationSchedule,
    opts: &RunOptions,
    trace: &mut TransactionTrace,
) -> Result<Option<QOp>> {
    let shapes: Vec<&OpShape> = inv.blocks.iter().flat_map(|b| b.ops.iter()).collect();
    if shapes.len() != inv.params.len() {
        return Err(Error::Runtime(format!("invocation {}: parameter table does not match its operators", inv.index)));
    }
    let mut ops = inv.params.iter().zip(&shapes).map(|(p, s)| fetch_op(mem, s, p, inv.index, Some(trace)));
    let mut blocks = Vec::with_capacity(inv.blocks.len());
    for b in &inv.blocks {
        let ops = (0..b.ops.len()).map(|_| ops.next().expect("counted above")).collect::<Result<Vec<_>>>()?;
        blocks.push(QBlock { ops });
    }

    let in_len = inv.input_bytes();
    let input = bytes_to_features(mem.read(inv.input_region, 0, in_len)?);
    trace.push(inv.index, TransferKind::Stream, Direction::Read, TensorRole::FeatureIn, "", in_len as u64);

    let mut skips = vec![SkipSource::OnChip; blocks.len()];
    if inv.residual == ResidualPlacement::OffChip {
        let bi = inv
            .blocks
            .iter()
            .position(|b| b.residual)
            .ok_or_else(|| Error::Runtime(format!("invocation {}: off-chip residual without a residual block", inv.index)))?;
        // the block input is the invocation input, still in DDR
        let operand = bytes_to_features(mem.read(inv.input_region, 0, in_len)?);
        trace.push(inv.index, TransferKind::Stream, Direction::Read, TensorRole::Residual, "", in_len as u64);
        skips[bi] = SkipSource::OffChip(operand);
    }

    let lanes: HashMap<&str, usize> = inv.lanes.iter().map(|(n, l)| (n.as_str(), *l)).collect();
    let refs: Vec<&QBlock> = blocks.iter().collect();
    let (mut stages, out_shape) = build_stages(&refs, inv.input, &skips, &|c| lanes.get(c.name.as_str()).copied())?;
    if out_shape != inv.output {
        return Err(Error::Runtime(format!("invocation {}: produced {out_shape}, schedule expects {}", inv.index, inv.output)));
    }
    let depth = opts
        .fifo_depth
        .unwrap_or_else(|| default_depth(&stages, inv.input).max(default_depth(&stages, out_shape)));
    let out = run_stages(&mut stages, &input, depth, opts.driver, false)?.output;

    let bytes = if inv.out_elem_bytes == 4 {
        logits_to_bytes(&out)
    } else {
        features_to_bytes(&out)?
    };
    mem.write(inv.output_region, 0, &bytes)?;
    trace.push(inv.index, TransferKind::Stream, Direction::Write, TensorRole::FeatureOut, "", bytes.len() as u64);
    Ok(blocks.pop().and_then(|mut b| b.ops.pop()))
}

/// Host-side execution of unmapped trailing blocks.
fn run_host_blocks(mem: &mut SharedMemoryImage, schedule: &Schedule, mut cur: Tensor<i32>, last: &mut Option<QOp>) -> Result<Tensor<i32>> {
    for hb in &schedule.host_blocks {
        let block_in = cur.clone();
        for (shape, p) in hb.block.ops.iter().zip(&hb.params) {
            let op = fetch_op(mem, shape, p, usize::MAX, None)?;
            cur = match &op {
                QOp::Conv(c) => qconv_ref(&cur, c)?,
                QOp::AvgPool(_) => avg_pool_ref(&cur),
                QOp::SqueezeExcite(se) => se_ref(&cur, se)?,
                QOp::ResidualAdd(r) => residual_ref(&block_in, &cur, r)?,
                QOp::Dense(d) => Tensor::new(Shape::new(d.m, 1, 1), dense_ref(&cur, d)?)?,
            };
            *last = Some(op);
        }
    }
    Ok(cur)
}

fn dequantize_output(last: Option<&QOp>, out: &[i32], channels: usize) -> Vec<f64> {
    out.iter()
        .enumerate()
        .map(|(i, &v)| match last {
            Some(QOp::Dense(d)) => v as f64 * d.logit_scale(i % channels),
            Some(op) => op.out_spec().map_or(v as f64, |s| s.dequantize(v, 0)),
            None => v as f64,
        })
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Runs one inference through the schedule. `input` must already be
/// quantized to the network input spec.
pub fn run_inference(
    plan: &HardwarePlan,
    schedule: &Schedule,
    mem: &mut SharedMemoryImage,
    input: &Tensor<i32>,
    opts: &RunOptions,
) -> Result<InferenceResult> {
    check_consistent(plan, schedule)?;
    if input.shape() != schedule.input {
        return Err(Error::ShapeMismatch(format!("input {} vs scheduled {}", input.shape(), schedule.input)));
    }
    if schedule.invocations.is_empty() {
        return Err(Error::Runtime("empty schedule".into()));
    }
    mem.write(schedule.input_region(), 0, &features_to_bytes(&input.to_pixel_major())?)?;

    let mut trace = TransactionTrace::default();
    let mut last = None;
    for inv in &schedule.invocations {
        last = run_invocation(mem, inv, opts, &mut trace)?;
    }

    let fin = schedule.invocations.last().expect("non-empty");
    let stream = if fin.out_elem_bytes == 4 {
        bytes_to_logits(mem.read(fin.output_region, 0, fin.output_bytes())?)
    } else {
        bytes_to_features(mem.read(fin.output_region, 0, fin.output_bytes())?)
    };
    let mut output = stream;
    let mut output_shape = fin.output;
    if !schedule.host_blocks.is_empty() {
        let t = Tensor::from_pixel_major(fin.output, &output)?;
        let t = run_host_blocks(mem, schedule, t, &mut last)?;
        output_shape = t.shape();
        output = t.to_pixel_major();
    }

    let argmax = output
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i);
    let confidences = softmax(&dequantize_output(last.as_ref(), &output, output_shape.c));
    let perf = estimate_performance(plan, schedule, opts.perf)?;
    Ok(InferenceResult {
        output,
        output_shape,
        argmax,
        confidences,
        trace,
        perf,
    })
}
