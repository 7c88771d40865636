//! Width-multiplier scaling of channel counts.

use crate::error::{Error, Result};
use crate::ir::graph::NetworkGraph;
use crate::ir::layer::{ConvKind, LayerKind};

/// Rounding rule for scaled channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthRule {
    pub divisor: usize,
    pub min_channels: usize,
}

impl Default for WidthRule {
    fn default() -> Self {
        WidthRule {
            divisor: 8,
            min_channels: 8,
        }
    }
}

impl WidthRule {
    /// Rounds `v` to the nearest multiple of `divisor`, never below
    /// `min_channels` and never more than 10% below `v`.
    pub fn make_divisible(&self, v: f64) -> usize {
        let d = self.divisor as f64;
        let mut r = self.min_channels.max(((v + d / 2.0) / d).floor() as usize * self.divisor);
        if (r as f64) < 0.9 * v {
            r += self.divisor;
        }
        r
    }
}

/// Scales `g` by `alpha` with the default rule.
pub fn apply_width_multiplier(g: &NetworkGraph, alpha: f64) -> Result<NetworkGraph> {
    apply_width_multiplier_with(g, alpha, WidthRule::default())
}

/// Scales every channel count of `g` by `alpha`.
///
/// Conventions:
/// * the first convolution (the stem) keeps its width;
/// * IRB outputs become `make_divisible(M·α)`;
/// * expansion widths keep their ratio to the (scaled) block input;
/// * squeeze widths keep their ratio to the channels they gate;
/// * plain-block pointwise convolutions (the tail) keep `max(M, M·α)`;
/// * dense layers follow their input and keep the class count.
///
/// `alpha == 1` returns the graph untouched. Any other value returns a
/// shape-only graph: trained weights are tied to their width.
pub fn apply_width_multiplier_with(g: &NetworkGraph, alpha: f64, rule: WidthRule) -> Result<NetworkGraph> {
    if !(alpha > 0.0) {
        return Err(Error::WidthMultiplier(format!("alpha must be positive, got {alpha}")));
    }
    if alpha > 1.0 {
        return Err(Error::WidthMultiplier(format!("alpha must not exceed 1, got {alpha}")));
    }
    if rule.divisor == 0 {
        return Err(Error::WidthMultiplier("channel divisor must be at least 1".into()));
    }
    if alpha == 1.0 {
        return Ok(g.clone());
    }
    let scale_out = |orig: usize| -> Result<usize> {
        let m = rule.make_divisible(orig as f64 * alpha);
        if m == 0 {
            return Err(Error::WidthMultiplier(format!(
                "{orig} channels scaled by {alpha} round to zero"
            )));
        }
        Ok(m)
    };

    let mut out = g.clone();
    out.strip_params();
    out.alpha = g.alpha * alpha;

    let mut cur = g.input_channels;
    let mut orig_cur = g.input_channels;
    let mut first_conv = true;
    for block in &mut out.blocks {
        let is_irb = block.is_irb();
        let mut seen_dw = false;
        for layer in &mut block.layers {
            match &mut layer.kind {
                LayerKind::Conv(c) => {
                    let orig_n = c.n;
                    let orig_m = c.m;
                    let new_m = match c.kind {
                        ConvKind::Normal if first_conv => orig_m,
                        ConvKind::Normal => scale_out(orig_m)?,
                        ConvKind::Depthwise => {
                            seen_dw = true;
                            cur
                        }
                        ConvKind::Pointwise if !is_irb => orig_m.max((orig_m as f64 * alpha) as usize),
                        ConvKind::Pointwise if seen_dw => scale_out(orig_m)?,
                        ConvKind::Pointwise => {
                            ((cur as f64) * (orig_m as f64) / (orig_n as f64)).round() as usize
                        }
                    };
                    if new_m == 0 {
                        return Err(Error::WidthMultiplier(format!(
                            "{}: width rounds to zero channels",
                            layer.name
                        )));
                    }
                    if c.kind == ConvKind::Depthwise {
                        c.groups = cur;
                    } else if c.groups > 1 && (!cur.is_multiple_of(c.groups) || new_m % c.groups != 0) {
                        return Err(Error::WidthMultiplier(format!(
                            "{}: scaled widths {cur}->{new_m} not divisible by {} groups",
                            layer.name, c.groups
                        )));
                    }
                    c.n = cur;
                    c.m = new_m;
                    first_conv = false;
                    orig_cur = orig_m;
                    cur = new_m;
                }
                LayerKind::BatchNorm(b) => b.channels = cur,
                LayerKind::SqueezeExcite(se) => {
                    let orig_sq = se.squeeze_width();
                    let sq = ((orig_sq * cur) as f64 / orig_cur as f64).round().max(1.0) as usize;
                    *se = crate::ir::layer::SqueezeExciteLayer::new(cur, sq);
                }
                LayerKind::Dense(d) => {
                    d.n = cur;
                    orig_cur = d.m;
                    cur = d.m;
                }
                LayerKind::Relu6 | LayerKind::HardSigmoid | LayerKind::AvgPool | LayerKind::ResidualAdd => {}
            }
        }
    }
    out.validate()?;
    Ok(out)
}
