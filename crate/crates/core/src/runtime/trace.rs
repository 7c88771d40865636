//! DDR transaction traces.
//!
//! Parameters move as burst reads into on-chip buffers; feature maps move
//! as streams. Within a fused invocation only the invocation input, its
//! output and an off-chip residual operand touch DDR.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compiler::buffers::ResidualPlacement;
use crate::compiler::partition::CuKind;
use crate::compiler::schedule::{InvocationSchedule, Schedule};
use crate::ir::shape::OpRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    Burst,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weights,
    Bias,
    QuantParams,
    FeatureIn,
    FeatureOut,
    Residual,
}

impl TensorRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            TensorRole::Weights => "weights",
            TensorRole::Bias => "bias",
            TensorRole::QuantParams => "quant_params",
            TensorRole::FeatureIn => "feature_in",
            TensorRole::FeatureOut => "feature_out",
            TensorRole::Residual => "residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub invocation: usize,
    pub kind: TransferKind,
    pub direction: Direction,
    pub role: TensorRole,
    /// Operator for parameter bursts, empty for feature streams.
    pub op: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceTotals {
    pub burst_bytes: u64,
    pub stream_read_bytes: u64,
    pub stream_write_bytes: u64,
}

impl TraceTotals {
    pub fn stream_bytes(&self) -> u64 {
        self.stream_read_bytes + self.stream_write_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransactionTrace {
    pub events: Vec<Transaction>,
}

impl TransactionTrace {
    pub fn push(&mut self, invocation: usize, kind: TransferKind, direction: Direction, role: TensorRole, op: &str, bytes: u64) {
        self.events.push(Transaction {
            invocation,
            kind,
            direction,
            role,
            op: op.to_string(),
            bytes,
        });
    }

    fn sum(events: impl Iterator<Item = impl std::borrow::Borrow<Transaction>>) -> TraceTotals {
        let mut t = TraceTotals::default();
        for e in events {
            let e = e.borrow();
            match (e.kind, e.direction) {
                (TransferKind::Burst, _) => t.burst_bytes += e.bytes,
                (TransferKind::Stream, Direction::Read) => t.stream_read_bytes += e.bytes,
                (TransferKind::Stream, Direction::Write) => t.stream_write_bytes += e.bytes,
            }
        }
        t
    }

    pub fn totals(&self) -> TraceTotals {
        Self::sum(self.events.iter())
    }

    pub fn invocation_totals(&self, invocation: usize) -> TraceTotals {
        Self::sum(self.events.iter().filter(|e| e.invocation == invocation))
    }

    pub fn role_bytes(&self, invocation: usize, role: TensorRole) -> u64 {
        self.events
            .iter()
            .filter(|e| e.invocation == invocation && e.role == role)
            .map(|e| e.bytes)
            .sum()
    }

    /// `invocation,kind,direction,role,op,bytes`, one line per event.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("invocation,kind,direction,role,op,bytes\n");
        for e in &self.events {
            let kind = match e.kind {
                TransferKind::Burst => "burst",
                TransferKind::Stream => "stream",
            };
            let dir = match e.direction {
                Direction::Read => "read",
                Direction::Write => "write",
            };
            writeln!(s, "{},{kind},{dir},{},{},{}", e.invocation, e.role.as_str(), e.op, e.bytes).unwrap();
        }
        s
    }
}

/// Trace of one invocation derived from shapes alone, in the order the
/// runtime issues the transfers.
pub fn invocation_transactions(schedule: &Schedule, inv: &InvocationSchedule, trace: &mut TransactionTrace) {
    let len = |r: Option<usize>| r.map_or(0, |r| schedule.layout.regions[r].len as u64);
    for p in &inv.params {
        for (region, role) in [
            (p.weights, TensorRole::Weights),
            (p.bias, TensorRole::Bias),
            (p.quant, TensorRole::QuantParams),
        ] {
            if region.is_some() {
                trace.push(inv.index, TransferKind::Burst, Direction::Read, role, &p.op, len(region));
            }
        }
    }
    trace.push(inv.index, TransferKind::Stream, Direction::Read, TensorRole::FeatureIn, "", inv.input_bytes() as u64);
    if inv.residual == ResidualPlacement::OffChip {
        trace.push(inv.index, TransferKind::Stream, Direction::Read, TensorRole::Residual, "", inv.input_bytes() as u64);
    }
    trace.push(inv.index, TransferKind::Stream, Direction::Write, TensorRole::FeatureOut, "", inv.output_bytes() as u64);
}

/// Byte counts for the whole schedule computed without running data.
pub fn trace_transactions(schedule: &Schedule) -> TransactionTrace {
    let mut t = TransactionTrace::default();
    for inv in &schedule.invocations {
        invocation_transactions(schedule, inv, &mut t);
    }
    t
}

/// Stream bytes if every operator of the invocation ran alone, reading its
/// input from DDR and writing its output back. A residual add reads both
/// operands.
pub fn unfused_stream_bytes(inv: &InvocationSchedule) -> u64 {
    let mut bytes = 0u64;
    for b in &inv.blocks {
        for op in &b.ops {
            bytes += (op.in_bytes() + op.out_bytes()) as u64;
            if op.role == OpRole::ResidualAdd {
                bytes += b.input.len() as u64;
            }
        }
    }
    bytes
}

/// Fused and unfused stream bytes per Body invocation.
pub fn body_fusion_savings(schedule: &Schedule, trace: &TransactionTrace) -> Vec<(usize, u64, u64)> {
    schedule
        .invocations
        .iter()
        .filter(|i| i.cu == CuKind::Body)
        .map(|i| (i.index, trace.invocation_totals(i.index).stream_bytes(), unfused_stream_bytes(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::plan::{compile, CompileOptions};
    use crate::compiler::schedule::emit_schedule;
    use crate::ir::shape::{block_shapes, BitWidthMap};
    use crate::ir::zoo;

    fn sched(arch: &str, alpha: f64, res: usize, map_classifier: bool) -> Schedule {
        let g = zoo::by_name(arch, alpha, res, None).unwrap();
        let blocks = block_shapes(&g, res, &BitWidthMap::deployment(&g, 4)).unwrap();
        let opts = CompileOptions {
            map_classifier,
            ..CompileOptions::default()
        };
        emit_schedule(&compile(arch, alpha, res, blocks, &opts).unwrap()).unwrap()
    }

    #[test]
    fn on_chip_residual_spills_nothing() {
        let s = sched("mobilenet_v2", 0.5, 96, true);
        let t = trace_transactions(&s);
        let body: Vec<_> = s.invocations.iter().filter(|i| i.cu == CuKind::Body).collect();
        assert!(body.iter().any(|i| i.residual == ResidualPlacement::OnChip));
        for i in body {
            assert_eq!(t.role_bytes(i.index, TensorRole::Residual), 0);
        }
    }

    #[test]
    fn off_chip_residual_is_re_read() {
        let s = sched("mobilenet_v2", 1.0, 224, true);
        let t = trace_transactions(&s);
        let i = s.invocations.iter().find(|i| i.residual == ResidualPlacement::OffChip).unwrap();
        assert_eq!(t.role_bytes(i.index, TensorRole::Residual), i.input_bytes() as u64);
    }

    #[test]
    fn weight_bursts_cover_the_packed_weights() {
        let s = sched("mobilenet_v2", 0.35, 128, true);
        let t = trace_transactions(&s);
        for inv in &s.invocations {
            let want: u64 = inv
                .blocks
                .iter()
                .flat_map(|b| b.ops.iter())
                .map(|o| (o.weight_elems() * o.weight_bits as usize).div_ceil(8) as u64)
                .sum();
            // SE packs two tensors separately, so allow one byte of slack per op
            let got = t.role_bytes(inv.index, TensorRole::Weights);
            assert!(got >= want && got <= want + inv.params.len() as u64, "{got} vs {want}");
        }
    }

    #[test]
    fn fusion_always_saves_stream_bytes() {
        for (arch, alpha, res, cls) in [("mobilenet_v2", 1.0, 224, true), ("efficientnet_compressed", 1.0, 128, false)] {
            let s = sched(arch, alpha, res, cls);
            let t = trace_transactions(&s);
            let savings = body_fusion_savings(&s, &t);
            assert!(!savings.is_empty());
            for (i, fused, unfused) in savings {
                assert!(fused < unfused, "invocation {i}: {fused} >= {unfused}");
            }
        }
    }

    #[test]
    fn csv_has_one_line_per_event() {
        let s = sched("toy", 1.0, 16, true);
        let t = trace_transactions(&s);
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), t.events.len() + 1);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,burst,read,weights,"));
        let tot = t.totals();
        assert_eq!(tot.stream_write_bytes, s.invocations.iter().map(|i| i.output_bytes() as u64).sum::<u64>());
    }
}
