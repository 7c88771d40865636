//! Streaming pooling, squeeze-excite, residual and classifier stages.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::kernel::stream::Stage;
use crate::quant::qnet::{pool_mean, QDense, QResidual, QSqueezeExcite};

/// Global average pooling: accumulates on the fly, emits `C` means after
/// the last pixel.
pub struct AvgPoolStage {
    name: String,
    channels: usize,
    pixels: usize,
    seen: usize,
    sums: Vec<i64>,
}

impl AvgPoolStage {
    pub fn new(name: impl Into<String>, channels: usize, pixels: usize) -> Self {
        AvgPoolStage {
            name: name.into(),
            channels,
            pixels,
            seen: 0,
            sums: vec![0; channels],
        }
    }
}

impl Stage for AvgPoolStage {
    fn name(&self) -> &str {
        &self.name
    }

    fn quantum(&self) -> usize {
        self.channels
    }

    fn input_len(&self) -> usize {
        self.channels * self.pixels
    }

    fn output_len(&self) -> usize {
        self.channels
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        for (s, &v) in self.sums.iter_mut().zip(input) {
            *s += v as i64;
        }
        self.seen += 1;
        if self.seen == self.pixels {
            out.extend(self.sums.iter().map(|&s| pool_mean(s, self.pixels as i64)));
        }
        Ok(())
    }
}

/// Squeeze-excite. The gate of a channel depends on the whole tensor, so
/// the stage buffers its input (the SE buffer) while pooling on the fly,
/// then emits the gated tensor.
pub struct SqueezeExciteStage {
    se: QSqueezeExcite,
    pixels: usize,
    buf: Vec<i32>,
    sums: Vec<i64>,
}

impl SqueezeExciteStage {
    pub fn new(se: QSqueezeExcite, pixels: usize) -> Self {
        SqueezeExciteStage {
            buf: Vec::with_capacity(pixels * se.channels),
            sums: vec![0; se.channels],
            se,
            pixels,
        }
    }

    /// Per-channel gate levels from pooled means.
    pub fn gates(se: &QSqueezeExcite, pooled: &[i32]) -> Result<Vec<i64>> {
        let (sq, ex) = (&se.squeeze, &se.excite);
        let zin = sq.in_spec.z();
        let mut squeezed = Vec::with_capacity(sq.m);
        for j in 0..sq.m {
            let zw = sq.w_zero(j);
            let mut acc = sq.bias[j] as i64;
            for (c, &p) in pooled.iter().enumerate() {
                acc += (p - zin) as i64 * (sq.weights[j * sq.n + c] - zw) as i64;
            }
            if acc.abs() > sq.acc_bound() {
                return Err(Error::AccumulatorOverflow(format!("{}: |{acc}| out of bound", sq.name)));
            }
            squeezed.push(sq.clip(acc, j));
        }
        let zs = ex.in_spec.z();
        (0..ex.m)
            .map(|c| {
                let zw = ex.w_zero(c);
                let mut acc = ex.bias[c] as i64;
                for (j, &s) in squeezed.iter().enumerate() {
                    acc += (s - zs) as i64 * (ex.weights[c * ex.n + j] - zw) as i64;
                }
                if acc.abs() > ex.acc_bound() {
                    return Err(Error::AccumulatorOverflow(format!("{}: |{acc}| out of bound", ex.name)));
                }
                Ok(se.gate(acc, c))
            })
            .collect()
    }
}

impl Stage for SqueezeExciteStage {
    fn name(&self) -> &str {
        &self.se.name
    }

    fn quantum(&self) -> usize {
        self.se.channels
    }

    fn input_len(&self) -> usize {
        self.pixels * self.se.channels
    }

    fn output_len(&self) -> usize {
        self.input_len()
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        for (s, &v) in self.sums.iter_mut().zip(input) {
            *s += v as i64;
        }
        self.buf.extend_from_slice(input);
        if self.buf.len() == self.input_len() {
            let pooled: Vec<i32> = self.sums.iter().map(|&s| pool_mean(s, self.pixels as i64)).collect();
            let gates = Self::gates(&self.se, &pooled)?;
            let c = self.se.channels;
            out.extend(self.buf.iter().enumerate().map(|(i, &x)| self.se.scale(x, gates[i % c])));
        }
        Ok(())
    }
}

/// Holding buffer for a residual operand, written by a [`TeeStage`] (or
/// prefilled from DDR) and drained by a [`ResidualStage`].
#[derive(Debug, Clone, Default)]
pub struct SkipBuffer {
    inner: Arc<Mutex<SkipState>>,
}

#[derive(Debug, Default)]
struct SkipState {
    data: VecDeque<i32>,
    pushed: u64,
    peak: usize,
}

impl SkipBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prefilled(data: &[i32]) -> Self {
        let s = SkipBuffer::new();
        s.push(data);
        s
    }

    pub fn push(&self, data: &[i32]) {
        let mut g = self.inner.lock().expect("skip buffer poisoned");
        g.data.extend(data.iter().copied());
        g.pushed += data.len() as u64;
        g.peak = g.peak.max(g.data.len());
    }

    fn pop_into(&self, n: usize, out: &mut Vec<i32>) -> bool {
        let mut g = self.inner.lock().expect("skip buffer poisoned");
        if g.data.len() < n {
            return false;
        }
        out.extend(g.data.drain(..n));
        true
    }

    pub fn pushed(&self) -> u64 {
        self.inner.lock().expect("skip buffer poisoned").pushed
    }

    /// Highest occupancy in elements.
    pub fn peak(&self) -> usize {
        self.inner.lock().expect("skip buffer poisoned").peak
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("skip buffer poisoned").data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forwards its input unchanged and copies it into a skip buffer.
pub struct TeeStage {
    name: String,
    quantum: usize,
    len: usize,
    skip: SkipBuffer,
}

impl TeeStage {
    pub fn new(name: impl Into<String>, quantum: usize, len: usize, skip: SkipBuffer) -> Self {
        TeeStage {
            name: name.into(),
            quantum,
            len,
            skip,
        }
    }
}

impl Stage for TeeStage {
    fn name(&self) -> &str {
        &self.name
    }

    fn quantum(&self) -> usize {
        self.quantum
    }

    fn input_len(&self) -> usize {
        self.len
    }

    fn output_len(&self) -> usize {
        self.len
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        self.skip.push(input);
        out.extend_from_slice(input);
        Ok(())
    }
}

/// Residual add of the main stream (`b`) and the skip buffer (`a`).
pub struct ResidualStage {
    res: QResidual,
    quantum: usize,
    len: usize,
    skip: SkipBuffer,
    consumed: usize,
    a: Vec<i32>,
}

impl ResidualStage {
    pub fn new(res: QResidual, quantum: usize, len: usize, skip: SkipBuffer) -> Self {
        ResidualStage {
            a: Vec::with_capacity(quantum),
            res,
            quantum,
            len,
            skip,
            consumed: 0,
        }
    }
}

impl Stage for ResidualStage {
    fn name(&self) -> &str {
        &self.res.name
    }

    fn quantum(&self) -> usize {
        self.quantum
    }

    fn input_len(&self) -> usize {
        self.len
    }

    fn output_len(&self) -> usize {
        self.len
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        self.a.clear();
        if !self.skip.pop_into(input.len(), &mut self.a) {
            return Err(Error::Underrun {
                stage: format!("{} (skip)", self.res.name),
                expected: self.len,
                received: self.consumed + self.skip.len(),
            });
        }
        self.consumed += input.len();
        out.extend(self.a.iter().zip(input).map(|(&a, &b)| self.res.combine(a, b)));
        Ok(())
    }
}

/// Fully connected classifier over the pooled vector; emits raw 32-bit
/// logits.
pub struct DenseStage {
    dense: QDense,
}

impl DenseStage {
    pub fn new(dense: QDense) -> Self {
        DenseStage { dense }
    }
}

impl Stage for DenseStage {
    fn name(&self) -> &str {
        &self.dense.name
    }

    fn quantum(&self) -> usize {
        self.dense.n
    }

    fn input_len(&self) -> usize {
        self.dense.n
    }

    fn output_len(&self) -> usize {
        self.dense.m
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        let d = &self.dense;
        let zx = d.in_spec.z();
        for m in 0..d.m {
            let zw = d.w_spec.channel(m).zero_point;
            let mut acc = d.bias[m] as i64;
            for (i, &x) in input.iter().enumerate() {
                acc += (x - zx) as i64 * (d.weights[m * d.n + i] - zw) as i64;
            }
            if acc.abs() > i32::MAX as i64 {
                return Err(Error::AccumulatorOverflow(format!("{}: logit {acc} exceeds 32 bits", d.name)));
            }
            out.push(acc as i32);
        }
        Ok(())
    }
}
