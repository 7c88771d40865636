//! Layer descriptors of the network IR.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Dense spatial convolution; `groups > 1` makes it a group convolution.
    Normal,
    /// One filter per input channel, no cross-channel reduction (`G = N = M`).
    Depthwise,
    /// 1x1 convolution, pure channel reduction.
    Pointwise,
}

impl ConvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConvKind::Normal => "normal_conv",
            ConvKind::Depthwise => "depthwise_conv",
            ConvKind::Pointwise => "pointwise_conv",
        }
    }
}

/// Trained parameters of a convolution or dense layer.
///
/// Weights are `(M, N / G, K, K)` row-major; bias has length `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
    /// `None` for shape-only graphs.
    pub params: Option<ConvParams>,
}

impl ConvLayer {
    pub fn normal(n: usize, m: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            kind: ConvKind::Normal,
            n,
            m,
            k,
            stride,
            groups: 1,
            params: None,
        }
    }

    pub fn group(n: usize, m: usize, k: usize, stride: usize, groups: usize) -> Self {
        ConvLayer {
            groups,
            ..ConvLayer::normal(n, m, k, stride)
        }
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize) -> Self {
        ConvLayer {
            kind: ConvKind::Depthwise,
            n: channels,
            m: channels,
            k,
            stride,
            groups: channels,
            params: None,
        }
    }

    pub fn pointwise(n: usize, m: usize) -> Self {
        ConvLayer {
            kind: ConvKind::Pointwise,
            n,
            m,
            k: 1,
            stride: 1,
            groups: 1,
            params: None,
        }
    }

    pub fn with_params(mut self, params: ConvParams) -> Self {
        self.params = Some(params);
        self
    }

    /// Input channels seen by one output channel.
    pub fn group_width(&self) -> usize {
        self.n / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.m * self.group_width() * self.k * self.k
    }

    pub fn padding(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGraph(format!("{name}: {msg}")));
        if self.n == 0 || self.m == 0 {
            return bad("zero channels".into());
        }
        if self.k == 0 || self.k.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.k));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.groups == 0 || !self.n.is_multiple_of(self.groups) || !self.m.is_multiple_of(self.groups) {
            return bad(format!(
                "group count {} must divide N={} and M={}",
                self.groups, self.n, self.m
            ));
        }
        match self.kind {
            ConvKind::Depthwise if self.groups != self.n || self.m != self.n => {
                return bad(format!(
                    "depthwise requires G = N = M (got N={}, M={}, G={})",
                    self.n, self.m, self.groups
                ));
            }
            ConvKind::Pointwise if self.k != 1 => {
                return bad("pointwise requires K=1".into());
            }
            ConvKind::Pointwise if self.stride != 1 => {
                return bad("pointwise requires stride 1".into());
            }
            _ => {}
        }
        if let Some(p) = &self.params {
            if p.weights.len() != self.weight_len() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: weight blob has {} elements, layer needs {}",
                    p.weights.len(),
                    self.weight_len()
                )));
            }
            if p.bias.len() != self.m {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: bias has {} elements, layer needs {}",
                    p.bias.len(),
                    self.m
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel batch-normalization statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub eps: f32,
    pub params: Option<BatchNormParams>,
}

impl BatchNormLayer {
    pub fn validate(&self, name: &str) -> Result<()> {
        if let Some(p) = &self.params {
            for (label, v) in [
                ("gamma", &p.gamma),
                ("beta", &p.beta),
                ("mean", &p.mean),
                ("var", &p.var),
            ] {
                if v.len() != self.channels {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: {label} has {} elements, expected {}",
                        v.len(),
                        self.channels
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Squeeze-and-excitation: global pool, 1x1 squeeze + ReLU, 1x1 excite,
/// hard-sigmoid gate applied channel-wise to the block tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezeExciteLayer {
    pub squeeze: ConvLayer,
    pub excite: ConvLayer,
}

impl SqueezeExciteLayer {
    pub fn new(channels: usize, squeeze: usize) -> Self {
        SqueezeExciteLayer {
            squeeze: ConvLayer::pointwise(channels, squeeze),
            excite: ConvLayer::pointwise(squeeze, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.squeeze.n
    }

    pub fn squeeze_width(&self) -> usize {
        self.squeeze.m
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        self.squeeze.validate(&format!("{name}.squeeze"))?;
        self.excite.validate(&format!("{name}.excite"))?;
        if self.excite.n != self.squeeze.m || self.excite.m != self.squeeze.n {
            return Err(Error::InvalidGraph(format!(
                "{name}: excite {}->{} does not mirror squeeze {}->{}",
                self.excite.n, self.excite.m, self.squeeze.n, self.squeeze.m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub n: usize,
    pub m: usize,
    /// Weights `(M, N)`, bias `M`.
    pub params: Option<ConvParams>,
}

impl DenseLayer {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidGraph(format!("{name}: zero channels")));
        }
        if let Some(p) = &self.params {
            if p.weights.len() != self.n * self.m || p.bias.len() != self.m {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: dense {}x{} got {} weights and {} biases",
                    self.m,
                    self.n,
                    p.weights.len(),
                    p.bias.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Relu6,
    HardSigmoid,
    /// Global average pooling.
    AvgPool,
    /// Adds the enclosing block's input to the running tensor.
    ResidualAdd,
    SqueezeExcite(SqueezeExciteLayer),
    Dense(DenseLayer),
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(c) => c.kind.as_str(),
            LayerKind::BatchNorm(_) => "batch_norm",
            LayerKind::Relu6 => "relu6",
            LayerKind::HardSigmoid => "hard_sigmoid",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::SqueezeExcite(_) => "squeeze_excite",
            LayerKind::Dense(_) => "dense",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(self, LayerKind::Relu6 | LayerKind::HardSigmoid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }

    pub fn has_params(&self) -> bool {
        match &self.kind {
            LayerKind::Conv(c) => c.params.is_some(),
            LayerKind::BatchNorm(b) => b.params.is_some(),
            LayerKind::SqueezeExcite(se) => se.squeeze.params.is_some() && se.excite.params.is_some(),
            LayerKind::Dense(d) => d.params.is_some(),
            _ => true,
        }
    }

    pub fn strip_params(&mut self) {
        match &mut self.kind {
            LayerKind::Conv(c) => c.params = None,
            LayerKind::BatchNorm(b) => b.params = None,
            LayerKind::SqueezeExcite(se) => {
                se.squeeze.params = None;
                se.excite.params = None;
            }
            LayerKind::Dense(d) => d.params = None,
            _ => {}
        }
    }
}
