//! Byte layout of operator parameters in the shared memory image.
//!
//! Each parameterized operator owns three regions:
//! - weights: bit-packed, `BW` bits per value stored as `q − domain_lo`,
//!   LSB first, each tensor starting on a byte boundary;
//! - bias: `i32` little-endian per output channel;
//! - quant: quantization specs and requantizer records (below).
//!
//! A spec is `[bw u8, mode u8, granularity u8, 0u8, channels u32, clip_lo
//! f64, clip_hi f64]` followed by `(scale f64, zero i32)` per channel;
//! weight specs always carry one record per output channel. A requantizer
//! record is `(payload i64, shift i32)`: the mantissa for fixed-point, the
//! IEEE bits of the multiplier for real mode. All sizes follow from the
//! operator shape alone.

use crate::error::{Error, Result};
use crate::ir::layer::ConvKind;
use crate::ir::shape::{OpRole, OpShape};
use crate::quant::qnet::{FusedActivation, QConv, QDense, QOp, QPool, QResidual, QSqueezeExcite};
use crate::quant::requant::{RequantMode, Requantizer};
use crate::quant::spec::{Granularity, QuantMode, QuantSpec};

const SPEC_HEADER: usize = 24;
const CHANNEL_RECORD: usize = 12;
const REQUANT_RECORD: usize = 12;
const CONV_HEADER: usize = 4;

fn spec_len(channels: usize) -> usize {
    SPEC_HEADER + CHANNEL_RECORD * channels
}

fn conv_quant_len(m: usize) -> usize {
    CONV_HEADER + 2 * spec_len(1) + spec_len(m) + REQUANT_RECORD * m
}

pub fn packed_len(elems: usize, bw: u8) -> usize {
    (elems * bw as usize).div_ceil(8)
}

/// Byte sizes of the weight, bias and quant regions of `op`.
pub fn region_sizes(op: &OpShape) -> (usize, usize, usize) {
    let (n, m, s) = (op.input.c, op.output.c, op.squeeze);
    let bw = op.weight_bits;
    match op.role {
        OpRole::NormalConv | OpRole::Depthwise | OpRole::PwExpand | OpRole::PwProject | OpRole::Pointwise => {
            (packed_len(op.weight_elems(), bw), 4 * m, conv_quant_len(m))
        }
        OpRole::SqueezeExcite => (
            2 * packed_len(n * s, bw),
            4 * (s + n),
            CONV_HEADER + conv_quant_len(s) + conv_quant_len(n) + 2 * spec_len(1) + REQUANT_RECORD,
        ),
        OpRole::ResidualAdd => (0, 0, 3 * spec_len(1) + 20),
        OpRole::AvgPool => (0, 0, spec_len(1)),
        OpRole::Dense => (packed_len(n * m, bw), 4 * m, spec_len(1) + spec_len(m)),
    }
}

/// Encoded parameters of one operator.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoded {
    pub weights: Vec<u8>,
    pub bias: Vec<u8>,
    pub quant: Vec<u8>,
}

struct Writer<'a>(&'a mut Vec<u8>);

impl Writer<'_> {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn i32(&mut self, v: i32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn spec(&mut self, s: &QuantSpec, channels: usize) {
        self.u8(s.bw);
        self.u8(match s.mode {
            QuantMode::Asymmetric => 0,
            QuantMode::Symmetric => 1,
        });
        self.u8(match s.granularity {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => 1,
        });
        self.u8(0);
        self.0.extend_from_slice(&(channels as u32).to_le_bytes());
        self.f64(s.clip_range[0]);
        self.f64(s.clip_range[1]);
        for c in 0..channels {
            let p = s.channel(c);
            self.f64(p.scale);
            self.i32(p.zero_point);
        }
    }

    fn requant(&mut self, r: &Requantizer) {
        match *r {
            Requantizer::Fixed { mantissa, shift } => {
                self.i64(mantissa as i64);
                self.i32(shift);
            }
            Requantizer::Real(m) => {
                self.i64(m.to_bits() as i64);
                self.i32(0);
            }
        }
    }

    fn conv(&mut self, c: &QConv, mode: RequantMode) {
        self.u8(activation_code(c.activation));
        self.u8(mode_code(mode));
        self.u8(0);
        self.u8(0);
        self.spec(&c.in_spec, 1);
        self.spec(&c.w_spec, c.m);
        self.spec(&c.out_spec, 1);
        for r in &c.requant {
            self.requant(r);
        }
    }
}

fn activation_code(a: FusedActivation) -> u8 {
    match a {
        FusedActivation::None => 0,
        FusedActivation::Relu => 1,
        FusedActivation::Relu6 => 2,
        FusedActivation::HardSigmoid => 3,
    }
}

fn mode_code(m: RequantMode) -> u8 {
    match m {
        RequantMode::FixedPoint => 0,
        RequantMode::Real => 1,
    }
}

fn pack(values: &[i32], spec: &QuantSpec, out: &mut Vec<u8>) {
    let (lo, _) = spec.domain();
    let bw = spec.bw as usize;
    let start = out.len();
    out.resize(start + packed_len(values.len(), spec.bw), 0);
    for (i, &v) in values.iter().enumerate() {
        let u = (v - lo) as u32;
        for b in 0..bw {
            if u >> b & 1 == 1 {
                let bit = i * bw + b;
                out[start + bit / 8] |= 1 << (bit % 8);
            }
        }
    }
}

fn unpack(bytes: &[u8], n: usize, bw: u8, lo: i32) -> Result<Vec<i32>> {
    let need = packed_len(n, bw);
    if bytes.len() < need {
        return Err(Error::Memory(format!("weight region holds {} bytes, {need} needed", bytes.len())));
    }
    let bw = bw as usize;
    Ok((0..n)
        .map(|i| {
            let mut u = 0u32;
            for b in 0..bw {
                let bit = i * bw + b;
                u |= ((bytes[bit / 8] >> (bit % 8)) as u32 & 1) << b;
            }
            u as i32 + lo
        })
        .collect())
}

fn bias_bytes(bias: &[i32], out: &mut Vec<u8>) {
    for b in bias {
        out.extend_from_slice(&b.to_le_bytes());
    }
}

pub fn encode(op: &QOp, mode: RequantMode) -> Encoded {
    let mut e = Encoded::default();
    match op {
        QOp::Conv(c) => {
            pack(&c.weights, &c.w_spec, &mut e.weights);
            bias_bytes(&c.bias, &mut e.bias);
            Writer(&mut e.quant).conv(c, mode);
        }
        QOp::SqueezeExcite(se) => {
            pack(&se.squeeze.weights, &se.squeeze.w_spec, &mut e.weights);
            pack(&se.excite.weights, &se.excite.w_spec, &mut e.weights);
            bias_bytes(&se.squeeze.bias, &mut e.bias);
            bias_bytes(&se.excite.bias, &mut e.bias);
            let mut w = Writer(&mut e.quant);
            w.u8(mode_code(mode));
            w.u8(0);
            w.u8(0);
            w.u8(0);
            w.conv(&se.squeeze, mode);
            w.conv(&se.excite, mode);
            w.spec(&se.in_spec, 1);
            w.spec(&se.out_spec, 1);
            w.requant(&se.out_requant);
        }
        QOp::ResidualAdd(r) => {
            let mut w = Writer(&mut e.quant);
            w.spec(&r.a_spec, 1);
            w.spec(&r.b_spec, 1);
            w.spec(&r.out_spec, 1);
            w.i64(r.ma);
            w.i64(r.mb);
            w.i32(r.shift);
        }
        QOp::AvgPool(p) => Writer(&mut e.quant).spec(&p.spec, 1),
        QOp::Dense(d) => {
            pack(&d.weights, &d.w_spec, &mut e.weights);
            bias_bytes(&d.bias, &mut e.bias);
            let mut w = Writer(&mut e.quant);
            w.spec(&d.in_spec, 1);
            w.spec(&d.w_spec, d.m);
        }
    }
    e
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Memory(format!("{}: quant region truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bad(&self, msg: &str) -> Error {
        Error::Memory(format!("{}: {msg}", self.what))
    }

    fn spec(&mut self) -> Result<QuantSpec> {
        let bw = self.u8()?;
        let mode = match self.u8()? {
            0 => QuantMode::Asymmetric,
            1 => QuantMode::Symmetric,
            _ => return Err(self.bad("bad quant mode")),
        };
        let granularity = match self.u8()? {
            0 => Granularity::PerLayer,
            1 => Granularity::PerChannel,
            _ => return Err(self.bad("bad granularity")),
        };
        self.u8()?;
        let channels = self.u32()? as usize;
        let clip_range = [self.f64()?, self.f64()?];
        let mut scale = Vec::with_capacity(channels);
        let mut zero_point = Vec::with_capacity(channels);
        for _ in 0..channels {
            scale.push(self.f64()?);
            zero_point.push(self.i32()?);
        }
        if granularity == Granularity::PerLayer {
            scale.truncate(1);
            zero_point.truncate(1);
        }
        let s = QuantSpec {
            scale,
            zero_point,
            bw,
            mode,
            granularity,
            clip_range,
        };
        s.validate().map_err(|e| self.bad(&e.to_string()))?;
        Ok(s)
    }

    fn requant(&mut self, mode: RequantMode) -> Result<Requantizer> {
        let payload = self.i64()?;
        let shift = self.i32()?;
        Ok(match mode {
            RequantMode::FixedPoint => Requantizer::Fixed {
                mantissa: payload as i32,
                shift,
            },
            RequantMode::Real => Requantizer::Real(f64::from_bits(payload as u64)),
        })
    }

    fn mode(&mut self) -> Result<RequantMode> {
        match self.u8()? {
            0 => Ok(RequantMode::FixedPoint),
            1 => Ok(RequantMode::Real),
            _ => Err(self.bad("bad requantization mode")),
        }
    }

    /// Conv quant record; geometry, weights and bias come from elsewhere.
    fn conv(&mut self, shell: QConv) -> Result<QConv> {
        let activation = match self.u8()? {
            0 => FusedActivation::None,
            1 => FusedActivation::Relu,
            2 => FusedActivation::Relu6,
            3 => FusedActivation::HardSigmoid,
            _ => return Err(self.bad("bad activation")),
        };
        let mode = self.mode()?;
        self.take(2)?;
        let in_spec = self.spec()?;
        let w_spec = self.spec()?;
        let out_spec = self.spec()?;
        let requant = (0..shell.m).map(|_| self.requant(mode)).collect::<Result<Vec<_>>>()?;
        Ok(QConv {
            in_spec,
            w_spec,
            out_spec,
            requant,
            activation,
            ..shell
        })
    }
}

fn bias_from(bytes: &[u8], n: usize, what: &str) -> Result<Vec<i32>> {
    if bytes.len() < 4 * n {
        return Err(Error::Memory(format!("{what}: bias region truncated")));
    }
    Ok(bytes[..4 * n]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn conv_shell(name: String, kind: ConvKind, n: usize, m: usize, k: usize, stride: usize, groups: usize) -> QConv {
    QConv {
        name,
        kind,
        n,
        m,
        k,
        stride,
        groups,
        weights: Vec::new(),
        w_spec: QuantSpec::from_range(0.0, 1.0, 8, QuantMode::Asymmetric).expect("valid"),
        bias: Vec::new(),
        in_spec: QuantSpec::from_range(0.0, 1.0, 8, QuantMode::Asymmetric).expect("valid"),
        out_spec: QuantSpec::from_range(0.0, 1.0, 8, QuantMode::Asymmetric).expect("valid"),
        requant: Vec::new(),
        activation: FusedActivation::None,
    }
}

/// Rebuilds an operator from its shape and the bytes of its regions.
pub fn decode(op: &OpShape, weights: &[u8], bias: &[u8], quant: &[u8]) -> Result<QOp> {
    let mut r = Reader {
        bytes: quant,
        pos: 0,
        what: &op.name,
    };
    let (n, m) = (op.input.c, op.output.c);
    let name = op.name.clone();
    let q = match op.role {
        OpRole::NormalConv | OpRole::Depthwise | OpRole::PwExpand | OpRole::PwProject | OpRole::Pointwise => {
            let kind = match op.role {
                OpRole::NormalConv => ConvKind::Normal,
                OpRole::Depthwise => ConvKind::Depthwise,
                _ => ConvKind::Pointwise,
            };
            let mut c = r.conv(conv_shell(name, kind, n, m, op.k, op.stride, op.groups))?;
            c.weights = unpack(weights, c.weight_len(), c.w_spec.bw, c.w_spec.domain().0)?;
            c.bias = bias_from(bias, m, &op.name)?;
            QOp::Conv(c)
        }
        OpRole::SqueezeExcite => {
            let mode = r.mode()?;
            r.take(3)?;
            let s = op.squeeze;
            let mut sq = r.conv(conv_shell(format!("{name}.squeeze"), ConvKind::Pointwise, n, s, 1, 1, 1))?;
            let mut ex = r.conv(conv_shell(format!("{name}.excite"), ConvKind::Pointwise, s, n, 1, 1, 1))?;
            let half = packed_len(n * s, sq.w_spec.bw);
            if weights.len() < half {
                return Err(Error::Memory(format!("{name}: weight region truncated")));
            }
            sq.weights = unpack(weights, n * s, sq.w_spec.bw, sq.w_spec.domain().0)?;
            ex.weights = unpack(&weights[half..], n * s, ex.w_spec.bw, ex.w_spec.domain().0)?;
            let b = bias_from(bias, s + n, &name)?;
            sq.bias = b[..s].to_vec();
            ex.bias = b[s..].to_vec();
            let in_spec = r.spec()?;
            let out_spec = r.spec()?;
            let out_requant = r.requant(mode)?;
            QOp::SqueezeExcite(QSqueezeExcite {
                name,
                channels: n,
                squeeze: sq,
                excite: ex,
                in_spec,
                out_spec,
                out_requant,
            })
        }
        OpRole::ResidualAdd => {
            let a_spec = r.spec()?;
            let b_spec = r.spec()?;
            let out_spec = r.spec()?;
            QOp::ResidualAdd(QResidual {
                name,
                a_spec,
                b_spec,
                out_spec,
                ma: r.i64()?,
                mb: r.i64()?,
                shift: r.i32()?,
            })
        }
        OpRole::AvgPool => QOp::AvgPool(QPool {
            name,
            channels: n,
            spec: r.spec()?,
        }),
        OpRole::Dense => {
            let in_spec = r.spec()?;
            let w_spec = r.spec()?;
            QOp::Dense(QDense {
                weights: unpack(weights, n * m, w_spec.bw, w_spec.domain().0)?,
                bias: bias_from(bias, m, &name)?,
                name,
                n,
                m,
                w_spec,
                in_spec,
            })
        }
    };
    if r.pos != quant.len() {
        return Err(Error::Memory(format!(
            "{}: quant region holds {} bytes, record uses {}",
            op.name,
            quant.len(),
            r.pos
        )));
    }
    Ok(q)
}
