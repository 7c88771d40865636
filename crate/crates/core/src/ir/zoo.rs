//! Case-study network builders used as fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ir::graph::{Block, NetworkGraph};
use crate::ir::layer::{
    BatchNormLayer, BatchNormParams, ConvLayer, ConvParams, DenseLayer, Layer, LayerKind, SqueezeExciteLayer,
};
use crate::ir::width::apply_width_multiplier;

const BN_EPS: f32 = 1e-5;

fn conv(name: &str, c: ConvLayer) -> Layer {
    Layer::new(name, LayerKind::Conv(c))
}

fn bn(name: &str, channels: usize) -> Layer {
    Layer::new(
        name,
        LayerKind::BatchNorm(BatchNormLayer {
            channels,
            eps: BN_EPS,
            params: None,
        }),
    )
}

fn relu6(name: &str) -> Layer {
    Layer::new(name, LayerKind::Relu6)
}

fn conv_bn_act(prefix: &str, c: ConvLayer, act: bool) -> Vec<Layer> {
    let m = c.m;
    let mut v = vec![conv(prefix, c), bn(&format!("{prefix}_bn"), m)];
    if act {
        v.push(relu6(&format!("{prefix}_act")));
    }
    v
}

/// One inverted residual block: optional expansion, depthwise, optional
/// squeeze-excite, projection, and a residual add when shapes allow it.
fn irb(index: usize, cin: usize, expand: usize, cout: usize, k: usize, stride: usize, se_ratio: Option<f64>) -> Block {
    let p = format!("b{index}");
    let hidden = cin * expand;
    let mut layers = Vec::new();
    if expand != 1 {
        layers.extend(conv_bn_act(&format!("{p}.expand"), ConvLayer::pointwise(cin, hidden), true));
    }
    layers.extend(conv_bn_act(&format!("{p}.dw"), ConvLayer::depthwise(hidden, k, stride), true));
    if let Some(r) = se_ratio {
        let sq = ((cin as f64 * r) as usize).max(1);
        layers.push(Layer::new(
            format!("{p}.se"),
            LayerKind::SqueezeExcite(SqueezeExciteLayer::new(hidden, sq)),
        ));
    }
    layers.extend(conv_bn_act(&format!("{p}.project"), ConvLayer::pointwise(hidden, cout), false));
    if stride == 1 && cin == cout {
        layers.push(Layer::new(format!("{p}.add"), LayerKind::ResidualAdd));
    }
    Block::new(layers)
}

/// Expansion, output channels, repeats, first stride.
const MOBILENET_V2_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

/// MobileNet-V2 with 1000 classes: stem, 17 IRBs, tail pointwise, pooling,
/// dense classifier. With a seed, the graph carries random trained-like
/// parameters.
pub fn mobilenet_v2(alpha: f64, resolution: usize, seed: Option<u64>) -> Result<NetworkGraph> {
    let mut blocks = vec![Block::new(conv_bn_act("b0.conv", ConvLayer::normal(3, 32, 3, 2), true))];
    let mut cin = 32;
    for (t, c, n, s) in MOBILENET_V2_STAGES {
        for i in 0..n {
            let idx = blocks.len();
            blocks.push(irb(idx, cin, t, c, 3, if i == 0 { s } else { 1 }, None));
            cin = c;
        }
    }
    let idx = blocks.len();
    blocks.push(Block::new(conv_bn_act(
        &format!("b{idx}.conv"),
        ConvLayer::pointwise(cin, 1280),
        true,
    )));
    blocks.push(Block::new(vec![Layer::new(format!("b{}.pool", idx + 1), LayerKind::AvgPool)]));
    blocks.push(Block::new(vec![Layer::new(
        format!("b{}.fc", idx + 2),
        LayerKind::Dense(DenseLayer {
            n: 1280,
            m: 1000,
            params: None,
        }),
    )]));
    finish("mobilenet_v2", resolution, blocks, alpha, seed)
}

/// Compressed EfficientNet (lite-style, H=128 by default): stem, one head
/// IRB without expansion, nine expanded IRBs with squeeze-excite, tail
/// pointwise and pooling. No classifier.
pub fn efficientnet_compressed(resolution: usize, seed: Option<u64>) -> Result<NetworkGraph> {
    let mut blocks = vec![Block::new(conv_bn_act("b0.conv", ConvLayer::normal(3, 16, 3, 2), true))];
    blocks.push(irb(1, 16, 1, 8, 3, 1, Some(0.25)));
    let stages = [(6, 3, 2, 16, 2), (6, 5, 2, 24, 2), (6, 3, 2, 40, 2), (6, 5, 1, 48, 1), (6, 5, 2, 96, 2)];
    let mut cin = 8;
    for (e, k, s, c, r) in stages {
        for i in 0..r {
            let idx = blocks.len();
            blocks.push(irb(idx, cin, e, c, k, if i == 0 { s } else { 1 }, Some(0.25)));
            cin = c;
        }
    }
    let idx = blocks.len();
    blocks.push(Block::new(conv_bn_act(
        &format!("b{idx}.conv"),
        ConvLayer::pointwise(cin, 640),
        true,
    )));
    blocks.push(Block::new(vec![Layer::new(format!("b{}.pool", idx + 1), LayerKind::AvgPool)]));
    finish("efficientnet_compressed", resolution, blocks, 1.0, seed)
}

/// Stem, a single residual IRB, tail pointwise, pooling and a 10-way
/// classifier.
pub fn toy(resolution: usize, seed: Option<u64>) -> Result<NetworkGraph> {
    let blocks = vec![
        Block::new(conv_bn_act("b0.conv", ConvLayer::normal(3, 8, 3, 2), true)),
        irb(1, 8, 4, 8, 3, 1, None),
        Block::new(conv_bn_act("b2.conv", ConvLayer::pointwise(8, 32), true)),
        Block::new(vec![Layer::new("b3.pool", LayerKind::AvgPool)]),
        Block::new(vec![Layer::new(
            "b4.fc",
            LayerKind::Dense(DenseLayer {
                n: 32,
                m: 10,
                params: None,
            }),
        )]),
    ];
    finish("toy", resolution, blocks, 1.0, seed)
}

pub fn by_name(arch: &str, alpha: f64, resolution: usize, seed: Option<u64>) -> Result<NetworkGraph> {
    match arch {
        "mobilenet_v2" => mobilenet_v2(alpha, resolution, seed),
        "efficientnet_compressed" if alpha == 1.0 => efficientnet_compressed(resolution, seed),
        "toy" if alpha == 1.0 => toy(resolution, seed),
        "efficientnet_compressed" | "toy" => {
            let g = by_name(arch, 1.0, resolution, None)?;
            let mut g = apply_width_multiplier(&g, alpha)?;
            if let Some(s) = seed {
                randomize(&mut g, s);
            }
            Ok(g)
        }
        other => Err(crate::error::Error::InvalidGraph(format!("unknown architecture {other}"))),
    }
}

fn finish(arch: &str, resolution: usize, blocks: Vec<Block>, alpha: f64, seed: Option<u64>) -> Result<NetworkGraph> {
    let g = NetworkGraph {
        arch_name: arch.into(),
        alpha: 1.0,
        input_resolution: resolution,
        input_channels: 3,
        blocks,
    };
    g.validate()?;
    let mut g = apply_width_multiplier(&g, alpha)?;
    if let Some(s) = seed {
        randomize(&mut g, s);
    }
    Ok(g)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn conv_params(rng: &mut ChaCha8Rng, c: &ConvLayer) -> ConvParams {
    let fan_in = (c.group_width() * c.k * c.k) as f32;
    let a = (6.0 / fan_in).sqrt();
    ConvParams {
        weights: uniform(rng, c.weight_len(), -a, a),
        bias: uniform(rng, c.m, -0.05, 0.05),
    }
}

/// Fills every parameterized layer with seeded random values. Batch-norm
/// statistics are drawn so fusion is non-trivial.
pub fn randomize(g: &mut NetworkGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in &mut g.blocks {
        for layer in &mut block.layers {
            match &mut layer.kind {
                LayerKind::Conv(c) => c.params = Some(conv_params(&mut rng, c)),
                LayerKind::BatchNorm(b) => {
                    let n = b.channels;
                    b.params = Some(BatchNormParams {
                        gamma: uniform(&mut rng, n, 0.5, 1.5),
                        beta: uniform(&mut rng, n, -0.2, 0.2),
                        mean: uniform(&mut rng, n, -0.2, 0.2),
                        var: uniform(&mut rng, n, 0.5, 1.5),
                    });
                }
                LayerKind::SqueezeExcite(se) => {
                    se.squeeze.params = Some(conv_params(&mut rng, &se.squeeze));
                    se.excite.params = Some(conv_params(&mut rng, &se.excite));
                }
                LayerKind::Dense(d) => {
                    let a = (6.0 / d.n as f32).sqrt();
                    d.params = Some(ConvParams {
                        weights: uniform(&mut rng, d.n * d.m, -a, a),
                        bias: uniform(&mut rng, d.m, -0.05, 0.05),
                    });
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::graph::NetworkGraph;

    fn count_kinds(g: &NetworkGraph) -> (usize, usize) {
        let irbs = g.blocks.iter().filter(|b| b.is_irb()).count();
        let res = g.blocks.iter().filter(|b| b.has_residual()).count();
        (irbs, res)
    }

    #[test]
    fn mobilenet_structure() {
        let g = mobilenet_v2(1.0, 224, None).unwrap();
        assert_eq!(g.blocks.len(), 21);
        assert_eq!(count_kinds(&g), (17, 10));
        assert_eq!(g.output_shape().unwrap().c, 1000);
    }

    #[test]
    fn efficientnet_structure() {
        let g = efficientnet_compressed(128, None).unwrap();
        assert_eq!(count_kinds(&g).0, 10);
        assert_eq!(g.output_shape().unwrap(), crate::ir::tensor::Shape::new(640, 1, 1));
    }

    #[test]
    fn seeded_weights_are_deterministic() {
        let a = toy(16, Some(9)).unwrap();
        let b = toy(16, Some(9)).unwrap();
        let c = toy(16, Some(10)).unwrap();
        assert!(a.has_params());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
