//! The quantized network ("QNet") and the pass that builds it from a fused
//! float graph and calibration statistics.
//!
//! Activations are quantized per tensor, asymmetrically, at `bw` bits (the
//! network input at `input_bw`). Weights follow the configured mode and
//! granularity. A ReLU6 or hard-sigmoid right after a convolution is folded
//! into that convolution's output clamp; the result has no standalone
//! batch-norm or activation node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::graph::NetworkGraph;
use crate::ir::layer::{ConvKind, ConvLayer, ConvParams, DenseLayer, LayerKind, SqueezeExciteLayer};
use crate::ir::shape::{first_conv_name, BlockShape, OpRole, OpShape};
use crate::ir::tensor::Shape;
use crate::quant::calibrate::CalibrationStats;
use crate::quant::requant::{approximate_and_clip, round_shift, RequantMode, Requantizer};
use crate::quant::spec::{check_bw, round_half_away, Granularity, QuantMode, QuantSpec};

/// Squeeze-excite gate grid: `t = relu6(v + 3)` is held as `t_q·Δ` with
/// `Δ = 1/42`, so `+3` is `126` and the cap `6` is `252`.
pub const GATE_STEPS_PER_UNIT: f64 = 42.0;
pub const GATE_OFFSET: i64 = 126;
pub const GATE_MAX: i64 = 252;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bw: u8,
    pub first_conv_bw: u8,
    pub input_bw: u8,
    pub mode: QuantMode,
    pub granularity: Granularity,
    pub requant: RequantMode,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bw: 4,
            first_conv_bw: 8,
            input_bw: 8,
            mode: QuantMode::Asymmetric,
            granularity: Granularity::PerChannel,
            requant: RequantMode::FixedPoint,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        check_bw(self.bw)?;
        check_bw(self.first_conv_bw)?;
        check_bw(self.input_bw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedActivation {
    None,
    Relu,
    Relu6,
    HardSigmoid,
}

impl FusedActivation {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusedActivation::None => "none",
            FusedActivation::Relu => "relu",
            FusedActivation::Relu6 => "relu6",
            FusedActivation::HardSigmoid => "hard_sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => FusedActivation::None,
            "relu" => FusedActivation::Relu,
            "relu6" => FusedActivation::Relu6,
            "hard_sigmoid" => FusedActivation::HardSigmoid,
            other => return Err(Error::Quantization(format!("unsupported activation `{other}`"))),
        })
    }
}

/// Integer convolution: `acc = b + Σ (x − z_x)(w − z_w)`, then
/// approximate-and-clip into `out_spec`.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub name: String,
    pub kind: ConvKind,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    /// `(M, N/G, K, K)` in the domain of `w_spec`.
    pub weights: Vec<i32>,
    pub w_spec: QuantSpec,
    /// Accumulator-domain bias.
    pub bias: Vec<i32>,
    pub in_spec: QuantSpec,
    pub out_spec: QuantSpec,
    pub requant: Vec<Requantizer>,
    pub activation: FusedActivation,
}

impl QConv {
    pub fn group_width(&self) -> usize {
        self.n / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.m * self.group_width() * self.k * self.k
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn w_zero(&self, m: usize) -> i32 {
        self.w_spec.channel(m).zero_point
    }

    /// Static worst case of `|acc|`.
    pub fn acc_bound(&self) -> i64 {
        let x_span = (1i64 << self.in_spec.bw) - 1;
        let w_span = (1i64 << self.w_spec.bw) - 1;
        let max_bias = self.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        (self.group_width() * self.k * self.k) as i64 * x_span * w_span + max_bias
    }

    /// Output channels that read input channel group `g`.
    pub fn out_per_group(&self) -> usize {
        self.m / self.groups
    }

    #[inline]
    pub fn clip(&self, acc: i64, m: usize) -> i32 {
        approximate_and_clip(acc, &self.requant[m], self.out_spec.z(), self.out_spec.qmax())
    }
}

/// Global average pooling; the output stays in the input's spec.
#[derive(Debug, Clone, PartialEq)]
pub struct QPool {
    pub name: String,
    pub channels: usize,
    pub spec: QuantSpec,
}

/// Rounded mean of `n` unsigned samples whose sum is `sum`.
#[inline]
pub fn pool_mean(sum: i64, n: i64) -> i32 {
    ((2 * sum + n) / (2 * n)) as i32
}

/// Squeeze-excite. The squeeze convolution reads the pooled tensor (in the
/// input spec) and applies ReLU. The excite convolution's requantizers map
/// its accumulator onto the gate grid; the gate then scales the input.
#[derive(Debug, Clone, PartialEq)]
pub struct QSqueezeExcite {
    pub name: String,
    pub channels: usize,
    pub squeeze: QConv,
    pub excite: QConv,
    pub in_spec: QuantSpec,
    pub out_spec: QuantSpec,
    /// `S_in / (GATE_MAX · S_out)`.
    pub out_requant: Requantizer,
}

impl QSqueezeExcite {
    /// Gate level in `[0, GATE_MAX]` for excite accumulator `acc` on channel `c`.
    #[inline]
    pub fn gate(&self, acc: i64, c: usize) -> i64 {
        (self.excite.requant[c].apply(acc) + GATE_OFFSET).clamp(0, GATE_MAX)
    }

    /// Gated output element for input `x` and gate level `t`.
    #[inline]
    pub fn scale(&self, x: i32, t: i64) -> i32 {
        let prod = (x - self.in_spec.z()) as i64 * t;
        approximate_and_clip(prod, &self.out_requant, self.out_spec.z(), self.out_spec.qmax())
    }
}

/// Residual add: `clamp(round((m_a·(a − z_a) + m_b·(b − z_b)) / 2^shift) + z_o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QResidual {
    pub name: String,
    pub a_spec: QuantSpec,
    pub b_spec: QuantSpec,
    pub out_spec: QuantSpec,
    pub ma: i64,
    pub mb: i64,
    pub shift: i32,
}

impl QResidual {
    pub fn new(name: String, a_spec: QuantSpec, b_spec: QuantSpec, out_spec: QuantSpec) -> Self {
        let ra = a_spec.s() / out_spec.s();
        let rb = b_spec.s() / out_spec.s();
        let top = ra.max(rb);
        let shift = (29 - top.log2().floor() as i32).clamp(0, 62);
        let f = |r: f64| round_half_away(r * 2f64.powi(shift)) as i64;
        QResidual {
            name,
            ma: f(ra),
            mb: f(rb),
            shift,
            a_spec,
            b_spec,
            out_spec,
        }
    }

    #[inline]
    pub fn combine(&self, a: i32, b: i32) -> i32 {
        let v = self.ma as i128 * (a - self.a_spec.z()) as i128 + self.mb as i128 * (b - self.b_spec.z()) as i128;
        let r = round_shift(v, self.shift) as i64 + self.out_spec.z() as i64;
        r.clamp(0, self.out_spec.qmax() as i64) as i32
    }
}

/// Fully connected classifier; its outputs are raw 32-bit accumulators
/// (logits in units of `S_in · S_w[m]`).
#[derive(Debug, Clone, PartialEq)]
pub struct QDense {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub weights: Vec<i32>,
    pub w_spec: QuantSpec,
    pub bias: Vec<i32>,
    pub in_spec: QuantSpec,
}

impl QDense {
    pub fn logit_scale(&self, m: usize) -> f64 {
        self.in_spec.s() * self.w_spec.channel(m).scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QOp {
    Conv(QConv),
    AvgPool(QPool),
    SqueezeExcite(QSqueezeExcite),
    ResidualAdd(QResidual),
    Dense(QDense),
}

impl QOp {
    pub fn name(&self) -> &str {
        match self {
            QOp::Conv(c) => &c.name,
            QOp::AvgPool(p) => &p.name,
            QOp::SqueezeExcite(s) => &s.name,
            QOp::ResidualAdd(r) => &r.name,
            QOp::Dense(d) => &d.name,
        }
    }

    /// Spec of the tensor this op produces (`None` for raw logits).
    pub fn out_spec(&self) -> Option<&QuantSpec> {
        match self {
            QOp::Conv(c) => Some(&c.out_spec),
            QOp::AvgPool(p) => Some(&p.spec),
            QOp::SqueezeExcite(s) => Some(&s.out_spec),
            QOp::ResidualAdd(r) => Some(&r.out_spec),
            QOp::Dense(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBlock {
    pub ops: Vec<QOp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub arch_name: String,
    pub alpha: f64,
    pub input_resolution: usize,
    pub input_channels: usize,
    pub input_spec: QuantSpec,
    pub requant_mode: RequantMode,
    pub blocks: Vec<QBlock>,
}

impl QNet {
    pub fn input_shape(&self) -> Shape {
        Shape::new(self.input_channels, self.input_resolution, self.input_resolution)
    }

    pub fn ops(&self) -> impl Iterator<Item = &QOp> {
        self.blocks.iter().flat_map(|b| b.ops.iter())
    }

    /// Shape-only view, with the bit-widths the QNet actually uses.
    pub fn block_shapes(&self) -> Result<Vec<BlockShape>> {
        let mut cur = self.input_shape();
        let mut cur_bits = self.input_spec.bw;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let block_in = cur;
            let is_irb = block.ops.iter().any(|o| matches!(o, QOp::Conv(c) if c.kind == ConvKind::Depthwise));
            let mut seen_dw = false;
            let mut ops = Vec::with_capacity(block.ops.len());
            for op in &block.ops {
                let mut s = OpShape {
                    name: op.name().to_string(),
                    role: OpRole::AvgPool,
                    input: cur,
                    output: cur,
                    k: 1,
                    stride: 1,
                    groups: 1,
                    squeeze: 0,
                    weight_bits: 0,
                    in_bits: cur_bits,
                    out_bits: op.out_spec().map(|s| s.bw).unwrap_or(32),
                };
                match op {
                    QOp::Conv(c) => {
                        if c.n != cur.c {
                            return Err(Error::InvalidGraph(format!(
                                "{}: expects {} channels, producer yields {}",
                                c.name, c.n, cur.c
                            )));
                        }
                        s.role = match c.kind {
                            ConvKind::Normal => OpRole::NormalConv,
                            ConvKind::Depthwise => {
                                seen_dw = true;
                                OpRole::Depthwise
                            }
                            ConvKind::Pointwise if !is_irb => OpRole::Pointwise,
                            ConvKind::Pointwise if seen_dw => OpRole::PwProject,
                            ConvKind::Pointwise => OpRole::PwExpand,
                        };
                        s.k = c.k;
                        s.stride = c.stride;
                        s.groups = c.groups;
                        s.weight_bits = c.w_spec.bw;
                        s.output = Shape::new(c.m, cur.h.div_ceil(c.stride), cur.w.div_ceil(c.stride));
                    }
                    QOp::AvgPool(_) => s.output = Shape::new(cur.c, 1, 1),
                    QOp::SqueezeExcite(se) => {
                        s.role = OpRole::SqueezeExcite;
                        s.squeeze = se.squeeze.m;
                        s.weight_bits = se.squeeze.w_spec.bw;
                    }
                    QOp::ResidualAdd(_) => {
                        s.role = OpRole::ResidualAdd;
                        if cur != block_in {
                            return Err(Error::InvalidGraph(format!("{}: residual shape mismatch", op.name())));
                        }
                    }
                    QOp::Dense(d) => {
                        s.role = OpRole::Dense;
                        s.weight_bits = d.w_spec.bw;
                        s.output = Shape::new(d.m, 1, 1);
                    }
                }
                cur = s.output;
                cur_bits = s.out_bits;
                ops.push(s);
            }
            out.push(BlockShape {
                index: bi,
                is_irb,
                residual: block.ops.iter().any(|o| matches!(o, QOp::ResidualAdd(_))),
                input: block_in,
                output: cur,
                ops,
            });
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Shape {
        self.block_shapes()
            .ok()
            .and_then(|b| b.last().map(|b| b.output))
            .unwrap_or_else(|| self.input_shape())
    }
}

/// Per-tensor activation spec from calibrated statistics.
fn activation_spec(stats: &CalibrationStats, name: &str, act: FusedActivation, bw: u8) -> Result<QuantSpec> {
    let (mn, mx) = stats
        .range(name)
        .ok_or_else(|| Error::Quantization(format!("no calibration statistics for `{name}`")))?;
    let (lo, hi) = match act {
        FusedActivation::None => (mn.min(0.0), mx.max(0.0)),
        FusedActivation::Relu => (0.0, mx.max(0.0)),
        FusedActivation::Relu6 => (0.0, mx.clamp(0.0, 6.0)),
        FusedActivation::HardSigmoid => (0.0, mx.clamp(0.0, 1.0)),
    };
    QuantSpec::from_range(lo, hi, bw, QuantMode::Asymmetric)
}

fn check_accumulator(c: &QConv) -> Result<()> {
    if c.acc_bound() > i32::MAX as i64 {
        return Err(Error::AccumulatorOverflow(format!(
            "{}: worst-case accumulator {} exceeds 32 bits",
            c.name,
            c.acc_bound()
        )));
    }
    Ok(())
}

fn bias_to_acc(b: f64, s_acc: f64, name: &str) -> Result<i32> {
    let q = round_half_away(b / s_acc);
    if q.abs() > (1i64 << 30) as f64 {
        return Err(Error::AccumulatorOverflow(format!("{name}: bias {b} needs {q} accumulator units")));
    }
    Ok(q as i32)
}

/// Per-output-channel requantizers of a convolution. `gate` selects the
/// squeeze-excite gate grid instead of `out_spec`.
pub(crate) fn conv_requantizers(
    m_out: usize,
    in_spec: &QuantSpec,
    w_spec: &QuantSpec,
    out_spec: &QuantSpec,
    act: FusedActivation,
    gate: bool,
    mode: RequantMode,
) -> Result<Vec<Requantizer>> {
    (0..m_out)
        .map(|m| {
            let s_acc = in_spec.s() * w_spec.channel(m).scale;
            let mult = match (gate, act) {
                (true, _) => s_acc * GATE_STEPS_PER_UNIT,
                (false, FusedActivation::HardSigmoid) => s_acc / (6.0 * out_spec.s()),
                (false, _) => s_acc / out_spec.s(),
            };
            Requantizer::new(mult, mode)
        })
        .collect()
}

pub(crate) fn gate_spec() -> QuantSpec {
    QuantSpec {
        scale: vec![1.0 / GATE_STEPS_PER_UNIT],
        zero_point: vec![GATE_OFFSET as i32],
        bw: 8,
        mode: QuantMode::Asymmetric,
        granularity: Granularity::PerLayer,
        clip_range: [-3.0, 3.0],
    }
}

pub(crate) fn se_out_requant(in_spec: &QuantSpec, out_spec: &QuantSpec, mode: RequantMode) -> Result<Requantizer> {
    Requantizer::new(in_spec.s() / (GATE_MAX as f64 * out_spec.s()), mode)
}

#[allow(clippy::too_many_arguments)]
fn quantize_conv(
    name: &str,
    c: &ConvLayer,
    in_spec: &QuantSpec,
    out_spec: QuantSpec,
    w_bw: u8,
    act: FusedActivation,
    cfg: &QuantConfig,
    gate: bool,
) -> Result<QConv> {
    let p = c
        .params
        .as_ref()
        .ok_or_else(|| Error::Quantization(format!("{name}: convolution has no weights")))?;
    let w_spec = QuantSpec::for_tensor(&p.weights, c.m, w_bw, cfg.mode, cfg.granularity)?;
    let weights = w_spec.quantize_tensor(&p.weights);
    // the gate path adds its +3 as GATE_OFFSET after requantization
    let offset = if act == FusedActivation::HardSigmoid && !gate { 3.0 } else { 0.0 };
    let bias = (0..c.m)
        .map(|m| bias_to_acc(p.bias[m] as f64 + offset, in_spec.s() * w_spec.channel(m).scale, name))
        .collect::<Result<Vec<_>>>()?;
    let requant = conv_requantizers(c.m, in_spec, &w_spec, &out_spec, act, gate, cfg.requant)?;
    let q = QConv {
        name: name.to_string(),
        kind: c.kind,
        n: c.n,
        m: c.m,
        k: c.k,
        stride: c.stride,
        groups: c.groups,
        weights,
        w_spec,
        bias,
        in_spec: in_spec.clone(),
        out_spec,
        requant,
        activation: act,
    };
    check_accumulator(&q)?;
    Ok(q)
}

fn quantize_se(se: &SqueezeExciteLayer, name: &str, in_spec: &QuantSpec, stats: &CalibrationStats, cfg: &QuantConfig) -> Result<QSqueezeExcite> {
    let sq_spec = activation_spec(stats, &format!("{name}.squeeze"), FusedActivation::Relu, cfg.bw)?;
    let squeeze = quantize_conv(
        &format!("{name}.squeeze"),
        &se.squeeze,
        in_spec,
        sq_spec.clone(),
        cfg.bw,
        FusedActivation::Relu,
        cfg,
        false,
    )?;
    let excite = quantize_conv(
        &format!("{name}.excite"),
        &se.excite,
        &sq_spec,
        gate_spec(),
        cfg.bw,
        FusedActivation::HardSigmoid,
        cfg,
        true,
    )?;
    let out_spec = activation_spec(stats, name, FusedActivation::None, cfg.bw)?;
    let out_requant = se_out_requant(in_spec, &out_spec, cfg.requant)?;
    Ok(QSqueezeExcite {
        name: name.to_string(),
        channels: se.channels(),
        squeeze,
        excite,
        in_spec: in_spec.clone(),
        out_spec,
        out_requant,
    })
}

fn quantize_dense(d: &DenseLayer, name: &str, in_spec: &QuantSpec, cfg: &QuantConfig) -> Result<QDense> {
    let ConvParams { weights, bias } = d
        .params
        .as_ref()
        .ok_or_else(|| Error::Quantization(format!("{name}: dense layer has no weights")))?;
    let w_spec = QuantSpec::for_tensor(weights, d.m, cfg.bw, cfg.mode, cfg.granularity)?;
    let qw = w_spec.quantize_tensor(weights);
    let qb = (0..d.m)
        .map(|m| bias_to_acc(bias[m] as f64, in_spec.s() * w_spec.channel(m).scale, name))
        .collect::<Result<Vec<_>>>()?;
    let bound = d.n as i64 * ((1i64 << in_spec.bw) - 1) * ((1i64 << cfg.bw) - 1)
        + qb.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
    if bound > i32::MAX as i64 {
        return Err(Error::AccumulatorOverflow(format!("{name}: worst-case accumulator {bound} exceeds 32 bits")));
    }
    Ok(QDense {
        name: name.to_string(),
        n: d.n,
        m: d.m,
        weights: qw,
        w_spec,
        bias: qb,
        in_spec: in_spec.clone(),
    })
}

/// Quantizes a batch-norm-fused graph and folds activations into the
/// preceding convolutions.
pub fn quantize_network(fused: &NetworkGraph, stats: &CalibrationStats, cfg: &QuantConfig) -> Result<QNet> {
    cfg.validate()?;
    fused.validate()?;
    let input_spec = activation_spec(stats, "input", FusedActivation::None, cfg.input_bw)?;
    let first_conv = first_conv_name(fused).map(str::to_string);
    let mut cur = input_spec.clone();
    let mut blocks = Vec::with_capacity(fused.blocks.len());
    for block in &fused.blocks {
        let block_in = cur.clone();
        let mut ops = Vec::new();
        let mut i = 0;
        while i < block.layers.len() {
            let layer = &block.layers[i];
            let name = layer.name.as_str();
            match &layer.kind {
                LayerKind::Conv(c) => {
                    let next = block.layers.get(i + 1);
                    let (act, out_name) = match next.map(|l| &l.kind) {
                        Some(LayerKind::Relu6) => (FusedActivation::Relu6, next.unwrap().name.as_str()),
                        Some(LayerKind::HardSigmoid) => (FusedActivation::HardSigmoid, next.unwrap().name.as_str()),
                        _ => (FusedActivation::None, name),
                    };
                    if act != FusedActivation::None {
                        i += 1;
                    }
                    let w_bw = if first_conv.as_deref() == Some(name) { cfg.first_conv_bw } else { cfg.bw };
                    let out_spec = activation_spec(stats, out_name, act, cfg.bw)?;
                    let q = quantize_conv(name, c, &cur, out_spec, w_bw, act, cfg, false)?;
                    cur = q.out_spec.clone();
                    ops.push(QOp::Conv(q));
                }
                LayerKind::BatchNorm(_) => {
                    return Err(Error::Quantization(format!("{name}: batch norm must be fused before quantization")))
                }
                LayerKind::Relu6 | LayerKind::HardSigmoid => {
                    return Err(Error::Quantization(format!(
                        "{name}: activation does not directly follow a convolution"
                    )))
                }
                LayerKind::AvgPool => ops.push(QOp::AvgPool(QPool {
                    name: name.to_string(),
                    channels: 0,
                    spec: cur.clone(),
                })),
                LayerKind::SqueezeExcite(se) => {
                    let q = quantize_se(se, name, &cur, stats, cfg)?;
                    cur = q.out_spec.clone();
                    ops.push(QOp::SqueezeExcite(q));
                }
                LayerKind::ResidualAdd => {
                    let out = activation_spec(stats, name, FusedActivation::None, cfg.bw)?;
                    let r = QResidual::new(name.to_string(), block_in.clone(), cur.clone(), out);
                    cur = r.out_spec.clone();
                    ops.push(QOp::ResidualAdd(r));
                }
                LayerKind::Dense(d) => ops.push(QOp::Dense(quantize_dense(d, name, &cur, cfg)?)),
            }
            i += 1;
        }
        blocks.push(QBlock { ops });
    }
    let mut q = QNet {
        arch_name: fused.arch_name.clone(),
        alpha: fused.alpha,
        input_resolution: fused.input_resolution,
        input_channels: fused.input_channels,
        input_spec,
        requant_mode: cfg.requant,
        blocks,
    };
    // pool widths are known only after shape propagation
    let shapes = q.block_shapes()?;
    for (b, bs) in q.blocks.iter_mut().zip(&shapes) {
        for (op, s) in b.ops.iter_mut().zip(&bs.ops) {
            if let QOp::AvgPool(p) = op {
                p.channels = s.input.c;
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo;
    use crate::quant::{bn::fuse_graph, calibrate::calibrate, calibrate::random_dataset};

    fn toy_qnet(bw: u8) -> QNet {
        let g = fuse_graph(&zoo::toy(16, Some(5)).unwrap()).unwrap();
        let data = random_dataset(g.input_shape(), 4, 1);
        let stats = calibrate(&g, &data).unwrap();
        quantize_network(
            &g,
            &stats,
            &QuantConfig {
                bw,
                ..QuantConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn no_batch_norm_or_standalone_activation_remains() {
        let q = toy_qnet(4);
        let n_conv = q.ops().filter(|o| matches!(o, QOp::Conv(_))).count();
        assert_eq!(n_conv, 5);
        let relu6 = q
            .ops()
            .filter(|o| matches!(o, QOp::Conv(c) if c.activation == FusedActivation::Relu6))
            .count();
        assert_eq!(relu6, 4, "stem, expansion, depthwise and tail absorb their ReLU6");
    }

    #[test]
    fn first_conv_is_eight_bit() {
        let q = toy_qnet(4);
        let QOp::Conv(stem) = &q.blocks[0].ops[0] else { panic!() };
        assert_eq!(stem.w_spec.bw, 8);
        assert_eq!(stem.in_spec.bw, 8);
        assert_eq!(stem.out_spec.bw, 4);
        let QOp::Conv(exp) = &q.blocks[1].ops[0] else { panic!() };
        assert_eq!(exp.w_spec.bw, 4);
    }

    #[test]
    fn relu6_outputs_have_zero_offset() {
        let q = toy_qnet(4);
        for op in q.ops() {
            if let QOp::Conv(c) = op {
                if c.activation == FusedActivation::Relu6 {
                    assert_eq!(c.out_spec.z(), 0);
                    assert!(c.out_spec.clip_range[1] <= 6.0);
                }
            }
        }
    }

    #[test]
    fn residual_is_commutative() {
        let a = QuantSpec::from_range(-1.0, 2.0, 4, QuantMode::Asymmetric).unwrap();
        let b = QuantSpec::from_range(-3.0, 1.0, 4, QuantMode::Asymmetric).unwrap();
        let o = QuantSpec::from_range(-3.0, 3.0, 4, QuantMode::Asymmetric).unwrap();
        let ab = QResidual::new("r".into(), a.clone(), b.clone(), o.clone());
        let ba = QResidual::new("r".into(), b, a, o);
        for x in 0..16 {
            for y in 0..16 {
                assert_eq!(ab.combine(x, y), ba.combine(y, x));
            }
        }
    }

    #[test]
    fn residual_with_zero_point_operand_requantizes_alone() {
        let a = QuantSpec::from_range(-1.0, 2.0, 4, QuantMode::Asymmetric).unwrap();
        let r = QResidual::new("r".into(), a.clone(), a.clone(), a.clone());
        for x in 0..16 {
            assert_eq!(r.combine(x, a.z()), x);
        }
    }

    #[test]
    fn missing_stats_reported() {
        let g = fuse_graph(&zoo::toy(16, Some(5)).unwrap()).unwrap();
        let err = quantize_network(&g, &CalibrationStats::default(), &QuantConfig::default()).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }
}
