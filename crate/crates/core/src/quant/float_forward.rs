//! Floating-point forward pass over a (fused or unfused) graph.

use crate::error::{Error, Result};
use crate::ir::graph::NetworkGraph;
use crate::ir::layer::{ConvLayer, LayerKind};
use crate::ir::tensor::{FloatTensor, Shape, Tensor};
use crate::kernel::reference::{ref_conv, ConvGeometry};

/// `min(max(x, 0), 6)`.
pub fn relu6(x: f64) -> f64 {
    x.clamp(0.0, 6.0)
}

/// `relu6(x + 3) / 6`.
pub fn hard_sigmoid(x: f64) -> f64 {
    relu6(x + 3.0) / 6.0
}

fn conv_forward(x: &FloatTensor, c: &ConvLayer, name: &str) -> Result<FloatTensor> {
    let p = c
        .params
        .as_ref()
        .ok_or_else(|| Error::InvalidGraph(format!("{name}: float forward needs weights")))?;
    let bias: Vec<f64> = p.bias.iter().map(|&b| b as f64).collect();
    let geom = ConvGeometry {
        m: c.m,
        k: c.k,
        stride: c.stride,
        groups: c.groups,
    };
    Ok(ref_conv(x, &p.weights, &bias, geom)?.map(|v| v as f32))
}

/// 1x1 convolution on a vector.
fn matvec(x: &[f64], w: &[f32], b: &[f32]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(m, &bm)| bm as f64 + (0..n).map(|i| w[m * n + i] as f64 * x[i]).sum::<f64>())
        .collect()
}

fn channel_means(x: &FloatTensor) -> Vec<f64> {
    let s = x.shape();
    (0..s.c)
        .map(|c| x.channel(c).iter().map(|&v| v as f64).sum::<f64>() / s.pixels() as f64)
        .collect()
}

/// Runs `g` on `input`, reporting every named tensor to `observe`: `"input"`,
/// each layer's output under the layer name, and the post-ReLU squeeze
/// vector of a squeeze-excite layer under `"<name>.squeeze"`.
pub fn forward_observed(
    g: &NetworkGraph,
    input: &FloatTensor,
    observe: &mut dyn FnMut(&str, &FloatTensor),
) -> Result<FloatTensor> {
    if input.shape().c != g.input_channels || input.shape().h != input.shape().w {
        return Err(Error::ShapeMismatch(format!(
            "input {} does not fit a {}-channel square network",
            input.shape(),
            g.input_channels
        )));
    }
    observe("input", input);
    let mut cur = input.clone();
    for block in &g.blocks {
        let block_in = cur.clone();
        for layer in &block.layers {
            let name = layer.name.as_str();
            cur = match &layer.kind {
                LayerKind::Conv(c) => conv_forward(&cur, c, name)?,
                LayerKind::BatchNorm(bn) => {
                    let p = bn
                        .params
                        .as_ref()
                        .ok_or_else(|| Error::InvalidGraph(format!("{name}: float forward needs statistics")))?;
                    let mut out = cur.clone();
                    let px = cur.shape().pixels();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        let ch = i / px;
                        let inv = 1.0 / (p.var[ch] as f64 + bn.eps as f64).sqrt();
                        *v = (p.gamma[ch] as f64 * (*v as f64 - p.mean[ch] as f64) * inv + p.beta[ch] as f64) as f32;
                    }
                    out
                }
                LayerKind::Relu6 => cur.map(|v| relu6(v as f64) as f32),
                LayerKind::HardSigmoid => cur.map(|v| hard_sigmoid(v as f64) as f32),
                LayerKind::AvgPool => {
                    let means = channel_means(&cur);
                    Tensor::new(Shape::new(means.len(), 1, 1), means.iter().map(|&v| v as f32).collect())?
                }
                LayerKind::ResidualAdd => {
                    let mut out = cur.clone();
                    for (o, &a) in out.data_mut().iter_mut().zip(block_in.data()) {
                        *o += a;
                    }
                    out
                }
                LayerKind::SqueezeExcite(se) => {
                    let (Some(sp), Some(ep)) = (&se.squeeze.params, &se.excite.params) else {
                        return Err(Error::InvalidGraph(format!("{name}: float forward needs weights")));
                    };
                    let pooled = channel_means(&cur);
                    let squeezed: Vec<f64> = matvec(&pooled, &sp.weights, &sp.bias).into_iter().map(|v| v.max(0.0)).collect();
                    let sq_t = Tensor::new(
                        Shape::new(squeezed.len(), 1, 1),
                        squeezed.iter().map(|&v| v as f32).collect(),
                    )?;
                    observe(&format!("{name}.squeeze"), &sq_t);
                    let gates: Vec<f64> = matvec(&squeezed, &ep.weights, &ep.bias).into_iter().map(hard_sigmoid).collect();
                    let px = cur.shape().pixels();
                    let mut out = cur.clone();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v = (*v as f64 * gates[i / px]) as f32;
                    }
                    out
                }
                LayerKind::Dense(d) => {
                    let p = d
                        .params
                        .as_ref()
                        .ok_or_else(|| Error::InvalidGraph(format!("{name}: float forward needs weights")))?;
                    let x: Vec<f64> = cur.data().iter().map(|&v| v as f64).collect();
                    let y = matvec(&x, &p.weights, &p.bias);
                    Tensor::new(Shape::new(d.m, 1, 1), y.iter().map(|&v| v as f32).collect())?
                }
            };
            observe(name, &cur);
        }
    }
    Ok(cur)
}

pub fn forward(g: &NetworkGraph, input: &FloatTensor) -> Result<FloatTensor> {
    forward_observed(g, input, &mut |_, _| {})
}
