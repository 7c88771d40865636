//! Range-based linear quantization.
//!
//! Real values map as `x = S·(q − z)`. Asymmetric specs use the unsigned
//! domain `[0, 2^BW − 1]`; symmetric specs use `[−2^(BW−1), 2^(BW−1) − 1]`
//! with `z = 0`. Rounding is half away from zero everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width applied to degenerate (zero-width) ranges.
pub const DEGENERATE_WIDEN: f64 = 1e-6;

pub const MIN_BW: u8 = 2;
pub const MAX_BW: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    #[default]
    Asymmetric,
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    #[default]
    PerChannel,
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn check_bw(bw: u8) -> Result<()> {
    if !(MIN_BW..=MAX_BW).contains(&bw) {
        return Err(Error::Quantization(format!(
            "bit-width {bw} outside [{MIN_BW}, {MAX_BW}]"
        )));
    }
    Ok(())
}

/// Integer domain of a `bw`-bit spec.
pub fn domain(bw: u8, mode: QuantMode) -> (i32, i32) {
    match mode {
        QuantMode::Asymmetric => (0, (1i32 << bw) - 1),
        QuantMode::Symmetric => (-(1i32 << (bw - 1)), (1i32 << (bw - 1)) - 1),
    }
}

/// Scale and zero point of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub scale: f64,
    pub zero_point: i32,
}

/// Derives scale and zero point from an observed range.
///
/// Asymmetric ranges are first widened to contain 0, so the zero point lies
/// in the domain and real zero is exactly representable. Zero-width ranges
/// are widened by [`DEGENERATE_WIDEN`] on each side.
pub fn channel_params(min_x: f64, max_x: f64, bw: u8, mode: QuantMode) -> Result<(ChannelParams, [f64; 2])> {
    check_bw(bw)?;
    if !(min_x <= max_x) {
        return Err(Error::Quantization(format!("invalid range [{min_x}, {max_x}]")));
    }
    let (lo, hi) = domain(bw, mode);
    match mode {
        QuantMode::Asymmetric => {
            let (mut mn, mut mx) = (min_x.min(0.0), max_x.max(0.0));
            if mn == mx {
                mn -= DEGENERATE_WIDEN;
                mx += DEGENERATE_WIDEN;
            }
            let scale = (mx - mn) / (hi - lo) as f64;
            let z = round_half_away(-mn / scale).clamp(lo as f64, hi as f64) as i32;
            Ok((ChannelParams { scale, zero_point: z }, [mn, mx]))
        }
        QuantMode::Symmetric => {
            let mut m = min_x.abs().max(max_x.abs());
            if m == 0.0 {
                m = DEGENERATE_WIDEN;
            }
            let scale = m / hi as f64;
            Ok((ChannelParams { scale, zero_point: 0 }, [-m, m]))
        }
    }
}

/// Scale, zero point, bit-width and granularity of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    #[serde(rename = "S")]
    pub scale: Vec<f64>,
    #[serde(rename = "z")]
    pub zero_point: Vec<i32>,
    #[serde(rename = "BW")]
    pub bw: u8,
    pub mode: QuantMode,
    pub granularity: Granularity,
    pub clip_range: [f64; 2],
}

impl QuantSpec {
    /// Per-layer spec for the range `[min_x, max_x]`.
    pub fn from_range(min_x: f64, max_x: f64, bw: u8, mode: QuantMode) -> Result<Self> {
        let (p, range) = channel_params(min_x, max_x, bw, mode)?;
        Ok(QuantSpec {
            scale: vec![p.scale],
            zero_point: vec![p.zero_point],
            bw,
            mode,
            granularity: Granularity::PerLayer,
            clip_range: range,
        })
    }

    /// Spec for a tensor whose leading axis has `channels` entries.
    pub fn for_tensor(data: &[f32], channels: usize, bw: u8, mode: QuantMode, granularity: Granularity) -> Result<Self> {
        if channels == 0 || !data.len().is_multiple_of(channels) {
            return Err(Error::ShapeMismatch(format!(
                "{} elements do not split into {channels} channels",
                data.len()
            )));
        }
        let range = |xs: &[f32]| {
            xs.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x as f64), b.max(x as f64)))
        };
        match granularity {
            Granularity::PerLayer => {
                let (mn, mx) = range(data);
                QuantSpec::from_range(mn, mx, bw, mode)
            }
            Granularity::PerChannel => {
                let per = data.len() / channels;
                let mut spec = QuantSpec {
                    scale: Vec::with_capacity(channels),
                    zero_point: Vec::with_capacity(channels),
                    bw,
                    mode,
                    granularity,
                    clip_range: [f64::INFINITY, f64::NEG_INFINITY],
                };
                for ch in data.chunks_exact(per) {
                    let (mn, mx) = range(ch);
                    let (p, r) = channel_params(mn, mx, bw, mode)?;
                    spec.scale.push(p.scale);
                    spec.zero_point.push(p.zero_point);
                    spec.clip_range[0] = spec.clip_range[0].min(r[0]);
                    spec.clip_range[1] = spec.clip_range[1].max(r[1]);
                }
                Ok(spec)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bw(self.bw)?;
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::Quantization("scale and zero-point lists differ".into()));
        }
        if self.granularity == Granularity::PerLayer && self.scale.len() != 1 {
            return Err(Error::Quantization("per-layer spec with several scales".into()));
        }
        let (lo, hi) = self.domain();
        for (&s, &z) in self.scale.iter().zip(&self.zero_point) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Quantization(format!("scale {s} must be positive")));
            }
            if z < lo || z > hi {
                return Err(Error::Quantization(format!("zero point {z} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> (i32, i32) {
        domain(self.bw, self.mode)
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Parameters that apply to output channel `ch`.
    pub fn channel(&self, ch: usize) -> ChannelParams {
        let i = if self.scale.len() == 1 { 0 } else { ch };
        ChannelParams {
            scale: self.scale[i],
            zero_point: self.zero_point[i],
        }
    }

    /// Per-tensor scale, for activation specs.
    pub fn s(&self) -> f64 {
        self.scale[0]
    }

    /// Per-tensor zero point, for activation specs.
    pub fn z(&self) -> i32 {
        self.zero_point[0]
    }

    pub fn qmax(&self) -> i32 {
        self.domain().1
    }

    pub fn quantize(&self, x: f64, ch: usize) -> i32 {
        let p = self.channel(ch);
        let (lo, hi) = self.domain();
        let q = round_half_away(x / p.scale) + p.zero_point as f64;
        q.clamp(lo as f64, hi as f64) as i32
    }

    pub fn dequantize(&self, q: i32, ch: usize) -> f64 {
        let p = self.channel(ch);
        p.scale * (q - p.zero_point) as f64
    }

    /// Quantizes a tensor whose leading axis is the channel axis.
    pub fn quantize_tensor(&self, data: &[f32]) -> Vec<i32> {
        let per = data.len() / self.channels().max(1);
        data.iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = if self.channels() == 1 { 0 } else { i / per };
                self.quantize(x as f64, ch)
            })
            .collect()
    }

    pub fn dequantize_tensor(&self, q: &[i32]) -> Vec<f64> {
        let per = q.len() / self.channels().max(1);
        q.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = if self.channels() == 1 { 0 } else { i / per };
                self.dequantize(v, ch)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu6_range_bw4() {
        let s = QuantSpec::from_range(0.0, 6.0, 4, QuantMode::Asymmetric).unwrap();
        assert!((s.s() - 0.4).abs() < 1e-12);
        assert_eq!(s.z(), 0);
        // all 16 levels land on the grid k·0.4
        for q in 0..16 {
            assert!((s.dequantize(q, 0) - 0.4 * q as f64).abs() < 1e-12);
            assert_eq!(s.quantize(0.4 * q as f64, 0), q);
        }
    }

    #[test]
    fn straddling_range_bw4() {
        let s = QuantSpec::from_range(-1.0, 3.0, 4, QuantMode::Asymmetric).unwrap();
        assert!((s.s() - 4.0 / 15.0).abs() < 1e-12);
        assert_eq!(s.z(), 4);
        assert!(s.dequantize(4, 0).abs() < 1e-12);
        assert_eq!(s.quantize(-1.0, 0), 0);
        assert_eq!(s.quantize(3.0, 0), 15);
    }

    #[test]
    fn symmetric_bw4() {
        let s = QuantSpec::from_range(-3.0, 3.0, 4, QuantMode::Symmetric).unwrap();
        assert!((s.s() - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(s.z(), 0);
        assert_eq!(s.domain(), (-8, 7));
    }

    #[test]
    fn degenerate_range_is_widened() {
        let s = QuantSpec::from_range(0.0, 0.0, 8, QuantMode::Asymmetric).unwrap();
        assert!(s.s() > 0.0);
        assert_eq!(s.clip_range, [-DEGENERATE_WIDEN, DEGENERATE_WIDEN]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn positive_range_is_extended_to_zero() {
        let s = QuantSpec::from_range(1.0, 3.0, 4, QuantMode::Asymmetric).unwrap();
        assert_eq!(s.clip_range, [0.0, 3.0]);
        assert_eq!(s.quantize(0.0, 0), 0);
    }

    #[test]
    fn bit_width_bounds() {
        assert!(QuantSpec::from_range(0.0, 1.0, 1, QuantMode::Asymmetric).is_err());
        assert!(QuantSpec::from_range(0.0, 1.0, 9, QuantMode::Asymmetric).is_err());
        assert!(QuantSpec::from_range(0.0, 1.0, 2, QuantMode::Asymmetric).is_ok());
    }

    #[test]
    fn saturation_is_relu6() {
        let s = QuantSpec::from_range(0.0, 6.0, 4, QuantMode::Asymmetric).unwrap();
        assert_eq!(s.quantize(7.2, 0), 15);
        assert!((s.dequantize(15, 0) - 6.0).abs() < 1e-12);
        assert_eq!(s.quantize(-0.3, 0), 0);
        assert_eq!(s.dequantize(0, 0), 0.0);
    }

    #[test]
    fn per_channel_spec_uses_each_channel_range() {
        let data = [0.0f32, 1.0, -2.0, 2.0];
        let s = QuantSpec::for_tensor(&data, 2, 4, QuantMode::Asymmetric, Granularity::PerChannel).unwrap();
        assert_eq!(s.channels(), 2);
        assert!((s.scale[0] - 1.0 / 15.0).abs() < 1e-12);
        assert!((s.scale[1] - 4.0 / 15.0).abs() < 1e-12);
        assert_eq!(s.quantize_tensor(&data), vec![0, 15, 0, 15]);
    }
}
