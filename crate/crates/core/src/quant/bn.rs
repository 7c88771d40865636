//! Folding batch normalization into the preceding convolution.

use crate::error::{Error, Result};
use crate::ir::graph::{Block, NetworkGraph};
use crate::ir::layer::{BatchNormLayer, ConvLayer, ConvParams, LayerKind};

/// Folds `bn` into `conv`.
///
/// With `v = (σ² + ε)^(-1/2)`, each output channel `m` becomes
/// `ŵ[m] = w[m]·γ[m]·v[m]` and `b̂[m] = γ[m]·v[m]·(b[m] − μ[m]) + β[m]`,
/// which equals `bn(conv(x))` for every `x`.
pub fn fuse_batch_norm(conv: &ConvLayer, bn: &BatchNormLayer) -> Result<ConvLayer> {
    if bn.channels != conv.m {
        return Err(Error::BatchNormFusion(format!(
            "batch norm has {} channels, convolution produces {}",
            bn.channels, conv.m
        )));
    }
    let (cp, bp) = match (&conv.params, &bn.params) {
        (Some(c), Some(b)) => (c, b),
        (None, None) => return Ok(conv.clone()),
        _ => {
            return Err(Error::BatchNormFusion(
                "cannot fold a batch norm into a shape-only convolution (or vice versa)".into(),
            ))
        }
    };
    let m = conv.m;
    for (label, v) in [("gamma", &bp.gamma), ("beta", &bp.beta), ("mean", &bp.mean), ("var", &bp.var)] {
        if v.len() != m {
            return Err(Error::BatchNormFusion(format!("{label} has {} entries, expected {m}", v.len())));
        }
    }
    if cp.bias.len() != m || cp.weights.len() != conv.weight_len() {
        return Err(Error::BatchNormFusion("convolution parameter lengths disagree with its shape".into()));
    }
    let per = conv.weight_len() / m;
    let mut weights = Vec::with_capacity(cp.weights.len());
    let mut bias = Vec::with_capacity(m);
    for ch in 0..m {
        let denom = bp.var[ch] as f64 + bn.eps as f64;
        if !(denom > 0.0) {
            return Err(Error::BatchNormFusion(format!(
                "channel {ch}: variance + eps = {denom} is not positive"
            )));
        }
        let g = bp.gamma[ch] as f64 / denom.sqrt();
        weights.extend(cp.weights[ch * per..(ch + 1) * per].iter().map(|&w| (w as f64 * g) as f32));
        bias.push((g * (cp.bias[ch] as f64 - bp.mean[ch] as f64) + bp.beta[ch] as f64) as f32);
    }
    Ok(ConvLayer {
        params: Some(ConvParams { weights, bias }),
        ..conv.clone()
    })
}

/// Removes every batch-norm layer by folding it into the convolution right
/// before it.
pub fn fuse_graph(g: &NetworkGraph) -> Result<NetworkGraph> {
    let mut blocks = Vec::with_capacity(g.blocks.len());
    for block in &g.blocks {
        let mut layers: Vec<crate::ir::layer::Layer> = Vec::with_capacity(block.layers.len());
        for layer in &block.layers {
            if let LayerKind::BatchNorm(bn) = &layer.kind {
                let prev = layers.last_mut().and_then(|l| match &mut l.kind {
                    LayerKind::Conv(c) => Some(c),
                    _ => None,
                });
                let Some(conv) = prev else {
                    return Err(Error::BatchNormFusion(format!(
                        "{} does not directly follow a convolution",
                        layer.name
                    )));
                };
                *conv = fuse_batch_norm(conv, bn)
                    .map_err(|e| Error::BatchNormFusion(format!("{}: {e}", layer.name)))?;
            } else {
                layers.push(layer.clone());
            }
        }
        blocks.push(Block::new(layers));
    }
    let out = NetworkGraph {
        blocks,
        ..g.clone()
    };
    out.validate()?;
    Ok(out)
}
