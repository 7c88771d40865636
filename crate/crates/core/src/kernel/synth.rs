//! Random quantized operators and tensors for oracle tests.

use rand::Rng;

use crate::ir::layer::ConvKind;
use crate::ir::tensor::{Shape, Tensor};
use crate::quant::qnet::{
    conv_requantizers, gate_spec, se_out_requant, FusedActivation, QConv, QDense, QResidual, QSqueezeExcite,
};
use crate::quant::requant::RequantMode;
use crate::quant::spec::{Granularity, QuantMode, QuantSpec};

/// Per-tensor asymmetric spec over a random range containing zero.
pub fn activation_spec<R: Rng>(rng: &mut R, bw: u8) -> QuantSpec {
    let lo = -rng.gen_range(0.0..2.0);
    let hi = rng.gen_range(0.1..4.0);
    QuantSpec::from_range(lo, hi, bw, QuantMode::Asymmetric).expect("valid range")
}

/// Per-channel asymmetric weight spec with random ranges.
pub fn weight_spec<R: Rng>(rng: &mut R, channels: usize, bw: u8) -> QuantSpec {
    let mut s = QuantSpec {
        scale: Vec::with_capacity(channels),
        zero_point: Vec::with_capacity(channels),
        bw,
        mode: QuantMode::Asymmetric,
        granularity: Granularity::PerChannel,
        clip_range: [0.0, 0.0],
    };
    for _ in 0..channels {
        let one = QuantSpec::from_range(-rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0), bw, QuantMode::Asymmetric)
            .expect("valid range");
        s.scale.push(one.s());
        s.zero_point.push(one.z());
        s.clip_range[0] = s.clip_range[0].min(one.clip_range[0]);
        s.clip_range[1] = s.clip_range[1].max(one.clip_range[1]);
    }
    s
}

pub fn tensor<R: Rng>(rng: &mut R, shape: Shape, bw: u8) -> Tensor<i32> {
    let qmax = (1i32 << bw) - 1;
    let data = (0..shape.len()).map(|_| rng.gen_range(0..=qmax)).collect();
    Tensor::new(shape, data).expect("length matches")
}

/// Convolution geometry `[n, m, k, stride, groups]`.
pub fn conv<R: Rng>(rng: &mut R, name: &str, kind: ConvKind, dims: [usize; 5], bw: u8, mode: RequantMode) -> QConv {
    let [n, m, k, stride, groups] = dims;
    let in_spec = activation_spec(rng, bw);
    let out_spec = activation_spec(rng, bw);
    let w_spec = weight_spec(rng, m, bw);
    let len = m * (n / groups) * k * k;
    let qmax = (1i32 << bw) - 1;
    let weights = (0..len).map(|_| rng.gen_range(0..=qmax)).collect();
    let bias = (0..m).map(|_| rng.gen_range(-2000..=2000)).collect();
    let requant = conv_requantizers(m, &in_spec, &w_spec, &out_spec, FusedActivation::None, false, mode).expect("finite");
    QConv {
        name: name.to_string(),
        kind,
        n,
        m,
        k,
        stride,
        groups,
        weights,
        w_spec,
        bias,
        in_spec,
        out_spec,
        requant,
        activation: FusedActivation::None,
    }
}

/// Squeeze-excite over `channels` with a squeeze width of `squeeze`.
pub fn squeeze_excite<R: Rng>(rng: &mut R, channels: usize, squeeze: usize, bw: u8, mode: RequantMode) -> QSqueezeExcite {
    let in_spec = activation_spec(rng, bw);
    let mut sq = conv(rng, "se.squeeze", ConvKind::Pointwise, [channels, squeeze, 1, 1, 1], bw, mode);
    sq.in_spec = in_spec.clone();
    sq.out_spec = QuantSpec::from_range(0.0, rng.gen_range(0.5..4.0), bw, QuantMode::Asymmetric).expect("valid");
    sq.activation = FusedActivation::Relu;
    sq.requant = conv_requantizers(squeeze, &sq.in_spec, &sq.w_spec, &sq.out_spec, sq.activation, false, mode).unwrap();
    let mut ex = conv(rng, "se.excite", ConvKind::Pointwise, [squeeze, channels, 1, 1, 1], bw, mode);
    ex.in_spec = sq.out_spec.clone();
    ex.out_spec = gate_spec();
    ex.activation = FusedActivation::HardSigmoid;
    ex.requant = conv_requantizers(channels, &ex.in_spec, &ex.w_spec, &ex.out_spec, ex.activation, true, mode).unwrap();
    let out_spec = activation_spec(rng, bw);
    let out_requant = se_out_requant(&in_spec, &out_spec, mode).unwrap();
    QSqueezeExcite {
        name: "se".into(),
        channels,
        squeeze: sq,
        excite: ex,
        in_spec,
        out_spec,
        out_requant,
    }
}

pub fn residual<R: Rng>(rng: &mut R, bw: u8) -> QResidual {
    QResidual::new(
        "add".into(),
        activation_spec(rng, bw),
        activation_spec(rng, bw),
        activation_spec(rng, bw),
    )
}

pub fn dense<R: Rng>(rng: &mut R, n: usize, m: usize, bw: u8) -> QDense {
    let qmax = (1i32 << bw) - 1;
    QDense {
        name: "fc".into(),
        n,
        m,
        weights: (0..n * m).map(|_| rng.gen_range(0..=qmax)).collect(),
        w_spec: weight_spec(rng, m, bw),
        bias: (0..m).map(|_| rng.gen_range(-5000..=5000)).collect(),
        in_spec: activation_spec(rng, bw),
    }
}
