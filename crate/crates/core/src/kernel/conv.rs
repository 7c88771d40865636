//! Streaming convolution stages.

use crate::error::{Error, Result};
use crate::ir::layer::ConvKind;
use crate::kernel::line_buffer::LineBuffer;
use crate::kernel::stream::Stage;
use crate::quant::qnet::QConv;

/// Closed-form number of padded pixels consumed before the first output
/// of a `K×K` window over rows `Wp` wide.
pub fn first_output_latency(k: usize, wp: usize) -> usize {
    (k - 1) * wp + k
}

/// Centered weights re-laid out as `[m][ky][kx][i]` to match the window.
fn window_weights(c: &QConv) -> Vec<i32> {
    let (gw, k) = (c.group_width(), c.k);
    let mut out = vec![0; c.weight_len()];
    for m in 0..c.m {
        let zw = c.w_zero(m);
        for i in 0..gw {
            for ky in 0..k {
                for kx in 0..k {
                    out[((m * k + ky) * k + kx) * gw + i] = c.weights[((m * gw + i) * k + ky) * k + kx] - zw;
                }
            }
        }
    }
    out
}

fn overflow(c: &QConv, acc: i64, bound: i64) -> Error {
    Error::AccumulatorOverflow(format!("{}: |{acc}| exceeds static bound {bound}", c.name))
}

/// Normal, group and depthwise convolution over a line buffer and sliding
/// window. Consumes one input pixel (`N` elements) per firing and emits
/// `M` elements per output pixel, pixel-major.
///
/// Same padding is realized by injecting zero-point pixels ahead of the
/// line buffer: the top rows and the first left border with the first
/// pixel, right and left borders at row ends, bottom rows after the last
/// pixel.
pub struct WindowConvStage {
    conv: QConv,
    h: usize,
    w: usize,
    pad: usize,
    wp: usize,
    lb: LineBuffer,
    weights: Vec<i32>,
    zx: i32,
    bound: i64,
    zero_px: Vec<i32>,
    centered: Vec<i32>,
    pixels_in: usize,
    padded_in: usize,
    first_output_at: Option<usize>,
    max_abs_acc: i64,
    probe: Option<Vec<Vec<i32>>>,
}

impl WindowConvStage {
    pub fn new(conv: QConv, h: usize, w: usize) -> Result<Self> {
        if conv.kind == ConvKind::Pointwise {
            return Err(Error::Runtime(format!("{}: pointwise layers use the scratchpad datapath", conv.name)));
        }
        if conv.k.is_multiple_of(2) || conv.stride == 0 || conv.groups == 0 || !conv.n.is_multiple_of(conv.groups) {
            return Err(Error::ShapeMismatch(format!("{}: unsupported window geometry", conv.name)));
        }
        let pad = conv.padding();
        let wp = w + 2 * pad;
        Ok(WindowConvStage {
            lb: LineBuffer::new(conv.k, wp, conv.n),
            weights: window_weights(&conv),
            zx: conv.in_spec.z(),
            bound: conv.acc_bound(),
            zero_px: vec![0; conv.n],
            centered: vec![0; conv.n],
            h,
            w,
            pad,
            wp,
            pixels_in: 0,
            padded_in: 0,
            first_output_at: None,
            max_abs_acc: 0,
            probe: None,
            conv,
        })
    }

    /// Records the window at every output position (for shadow checks).
    pub fn with_window_probe(mut self) -> Self {
        self.probe = Some(Vec::new());
        self
    }

    pub fn probed_windows(&self) -> &[Vec<i32>] {
        self.probe.as_deref().unwrap_or(&[])
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.h.div_ceil(self.conv.stride), self.w.div_ceil(self.conv.stride))
    }

    /// Padded pixels consumed when the first output was produced.
    pub fn first_output_at(&self) -> Option<usize> {
        self.first_output_at
    }

    pub fn padded_width(&self) -> usize {
        self.wp
    }

    pub fn max_abs_acc(&self) -> i64 {
        self.max_abs_acc
    }

    pub fn line_buffer_len(&self) -> usize {
        self.lb.ring_len()
    }

    fn compute(&mut self, out: &mut Vec<i32>) -> Result<()> {
        let c = &self.conv;
        let (k, n, gw) = (c.k, c.n, c.group_width());
        let mpg = c.out_per_group();
        let win = self.lb.window();
        let taps = k * k;
        for m in 0..c.m {
            let g = m / mpg;
            let wm = &self.weights[m * taps * gw..(m + 1) * taps * gw];
            let mut acc = c.bias[m] as i64;
            for t in 0..taps {
                let xs = &win[t * n + g * gw..t * n + (g + 1) * gw];
                let ws = &wm[t * gw..(t + 1) * gw];
                acc += xs.iter().zip(ws).map(|(&x, &w)| x as i64 * w as i64).sum::<i64>();
            }
            let a = acc.abs();
            if a > self.bound {
                return Err(overflow(c, acc, self.bound));
            }
            self.max_abs_acc = self.max_abs_acc.max(a);
            out.push(c.clip(acc, m));
        }
        Ok(())
    }

    fn shift_in(&mut self, px_is_pad: bool, out: &mut Vec<i32>) -> Result<()> {
        let (r, c) = if px_is_pad {
            self.lb.push(&self.zero_px)
        } else {
            self.lb.push(&self.centered)
        };
        self.padded_in += 1;
        let (k, s) = (self.conv.k, self.conv.stride);
        if r + 1 >= k && c + 1 >= k && (r + 1 - k) % s == 0 && (c + 1 - k) % s == 0 {
            if self.first_output_at.is_none() {
                self.first_output_at = Some(self.padded_in);
            }
            if let Some(p) = &mut self.probe {
                p.push(self.lb.window().to_vec());
            }
            self.compute(out)?;
        }
        Ok(())
    }

    fn pad_pixels(&mut self, count: usize, out: &mut Vec<i32>) -> Result<()> {
        for _ in 0..count {
            self.shift_in(true, out)?;
        }
        Ok(())
    }
}

impl Stage for WindowConvStage {
    fn name(&self) -> &str {
        &self.conv.name
    }

    fn quantum(&self) -> usize {
        self.conv.n
    }

    fn input_len(&self) -> usize {
        self.h * self.w * self.conv.n
    }

    fn output_len(&self) -> usize {
        let (ho, wo) = self.out_dims();
        ho * wo * self.conv.m
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        if self.pixels_in == 0 {
            self.pad_pixels(self.pad * self.wp + self.pad, out)?;
        }
        for (d, &v) in self.centered.iter_mut().zip(input) {
            *d = v - self.zx;
        }
        self.shift_in(false, out)?;
        let (y, x) = (self.pixels_in / self.w, self.pixels_in % self.w);
        self.pixels_in += 1;
        if x + 1 == self.w {
            if y + 1 == self.h {
                self.pad_pixels(self.pad + self.pad * self.wp, out)?;
            } else {
                self.pad_pixels(2 * self.pad, out)?;
            }
        }
        Ok(())
    }
}

/// Pointwise convolution from an on-chip weight scratchpad. One output
/// pixel needs all `N` input channels of its position; the input lanes are
/// reduced `P` at a time, with a shorter remainder pass when `P ∤ N`.
pub struct PointwiseStage {
    conv: QConv,
    pixels: usize,
    parallelism: usize,
    weights: Vec<i32>,
    zx: i32,
    bound: i64,
    centered: Vec<i64>,
    passes: u64,
    max_abs_acc: i64,
}

impl PointwiseStage {
    pub fn new(conv: QConv, pixels: usize, parallelism: usize) -> Result<Self> {
        if conv.k != 1 || conv.stride != 1 || conv.groups != 1 {
            return Err(Error::ShapeMismatch(format!(
                "{}: pointwise datapath needs K=1, stride 1, one group",
                conv.name
            )));
        }
        if parallelism == 0 {
            return Err(Error::Runtime(format!("{}: parallelism must be positive", conv.name)));
        }
        Ok(PointwiseStage {
            weights: window_weights(&conv),
            zx: conv.in_spec.z(),
            bound: conv.acc_bound(),
            centered: vec![0; conv.n],
            pixels,
            parallelism,
            passes: 0,
            max_abs_acc: 0,
            conv,
        })
    }

    /// Lane passes issued so far (`ceil(N/P)` per output element).
    pub fn passes(&self) -> u64 {
        self.passes
    }

    pub fn max_abs_acc(&self) -> i64 {
        self.max_abs_acc
    }
}

impl Stage for PointwiseStage {
    fn name(&self) -> &str {
        &self.conv.name
    }

    fn quantum(&self) -> usize {
        self.conv.n
    }

    fn input_len(&self) -> usize {
        self.pixels * self.conv.n
    }

    fn output_len(&self) -> usize {
        self.pixels * self.conv.m
    }

    fn fire(&mut self, input: &[i32], out: &mut Vec<i32>) -> Result<()> {
        let n = self.conv.n;
        for (d, &v) in self.centered.iter_mut().zip(input) {
            *d = (v - self.zx) as i64;
        }
        for m in 0..self.conv.m {
            let wm = &self.weights[m * n..(m + 1) * n];
            let mut acc = self.conv.bias[m] as i64;
            let mut lane = 0;
            while lane < n {
                let end = (lane + self.parallelism).min(n);
                acc += self.centered[lane..end]
                    .iter()
                    .zip(&wm[lane..end])
                    .map(|(&x, &w)| x * w as i64)
                    .sum::<i64>();
                self.passes += 1;
                lane = end;
            }
            let a = acc.abs();
            if a > self.bound {
                return Err(overflow(&self.conv, acc, self.bound));
            }
            self.max_abs_acc = self.max_abs_acc.max(a);
            out.push(self.conv.clip(acc, m));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::tensor::{Shape, Tensor};
    use crate::kernel::reference::qconv_ref;
    use crate::kernel::stream::run_round_robin;
    use crate::kernel::synth;
    use crate::quant::qnet::FusedActivation;
    use crate::quant::requant::{RequantMode, Requantizer};
    use crate::quant::spec::{QuantMode, QuantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(stage: impl Stage + 'static, x: &Tensor<i32>) -> Vec<i32> {
        let mut stages: Vec<Box<dyn Stage>> = vec![Box::new(stage)];
        let depth = x.shape().w * x.shape().c;
        run_round_robin(&mut stages, &x.to_pixel_major(), depth.max(64), false)
            .unwrap()
            .output
    }

    fn pixel_major(t: &Tensor<i32>) -> Vec<i32> {
        t.to_pixel_major()
    }

    /// Depthwise 3x3 whose centered kernel is a centre 1, with unit
    /// requantization.
    fn delta_kernel(bw: u8) -> QConv {
        let act = QuantSpec::from_range(-1.0, 2.0, bw, QuantMode::Asymmetric).unwrap();
        let w_spec = QuantSpec {
            scale: vec![1.0],
            zero_point: vec![3],
            bw,
            mode: QuantMode::Asymmetric,
            granularity: crate::quant::spec::Granularity::PerLayer,
            clip_range: [-3.0, 12.0],
        };
        let mut weights = vec![3; 9];
        weights[4] = 4;
        QConv {
            name: "dw".into(),
            kind: ConvKind::Depthwise,
            n: 1,
            m: 1,
            k: 3,
            stride: 1,
            groups: 1,
            weights,
            w_spec,
            bias: vec![0],
            in_spec: act.clone(),
            out_spec: act,
            requant: vec![Requantizer::new(1.0, RequantMode::FixedPoint).unwrap()],
            activation: FusedActivation::None,
        }
    }

    #[test]
    fn delta_kernel_reproduces_input() {
        let x = Tensor::new(Shape::new(1, 4, 4), (0..16).collect()).unwrap();
        let y = run(WindowConvStage::new(delta_kernel(4), 4, 4).unwrap(), &x);
        assert_eq!(y, pixel_major(&x));
    }

    #[test]
    fn depthwise_stride_two_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = synth::conv(&mut rng, "dw", ConvKind::Depthwise, [4, 4, 3, 2, 4], 4, RequantMode::FixedPoint);
        let x = synth::tensor(&mut rng, Shape::new(4, 8, 8), 4);
        let y = run(WindowConvStage::new(c.clone(), 8, 8).unwrap(), &x);
        assert_eq!(y, pixel_major(&qconv_ref(&x, &c).unwrap()));
    }

    #[test]
    fn saturating_input_hits_the_top_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = synth::conv(&mut rng, "dw", ConvKind::Depthwise, [4, 4, 3, 1, 4], 4, RequantMode::FixedPoint);
        c.weights.iter_mut().for_each(|w| *w = 15);
        c.in_spec = QuantSpec::from_range(-0.1, 4.0, 4, QuantMode::Asymmetric).unwrap();
        c.out_spec = QuantSpec::from_range(-0.1, 0.5, 4, QuantMode::Asymmetric).unwrap();
        c.bias.iter_mut().for_each(|b| *b = 0);
        c.requant = conv_reqs(&c);
        let x = Tensor::filled(Shape::new(4, 6, 6), 15);
        let mut s = WindowConvStage::new(c.clone(), 6, 6).unwrap();
        let mut out = Vec::new();
        for px in x.to_pixel_major().chunks(4) {
            s.fire(px, &mut out).unwrap();
        }
        assert!(out.iter().all(|&v| v == 15));
        assert!(s.max_abs_acc() <= c.acc_bound());
        assert!(c.acc_bound() <= i32::MAX as i64);
    }

    fn conv_reqs(c: &QConv) -> Vec<Requantizer> {
        crate::quant::qnet::conv_requantizers(c.m, &c.in_spec, &c.w_spec, &c.out_spec, c.activation, false, RequantMode::FixedPoint)
            .unwrap()
    }

    #[test]
    fn single_channel_normal_equals_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = synth::conv(&mut rng, "c", ConvKind::Normal, [1, 1, 3, 1, 1], 4, RequantMode::FixedPoint);
        let x = synth::tensor(&mut rng, Shape::new(1, 7, 5), 4);
        let a = run(WindowConvStage::new(c.clone(), 7, 5).unwrap(), &x);
        c.kind = ConvKind::Depthwise;
        let b = run(WindowConvStage::new(c, 7, 5).unwrap(), &x);
        assert_eq!(a, b);
    }

    #[test]
    fn normal_conv_matches_oracle_and_emits_pixel_zero_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = synth::conv(&mut rng, "c", ConvKind::Normal, [3, 8, 3, 1, 1], 8, RequantMode::FixedPoint);
        let x = synth::tensor(&mut rng, Shape::new(3, 8, 8), 8);
        let y = run(WindowConvStage::new(c.clone(), 8, 8).unwrap(), &x);
        let want = qconv_ref(&x, &c).unwrap();
        assert_eq!(y, pixel_major(&want));
        let first: Vec<i32> = (0..8).map(|m| want.at(m, 0, 0)).collect();
        assert_eq!(&y[..8], &first[..]);
    }

    #[test]
    fn first_output_after_closed_form_fill() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, w) in [(3, 4), (5, 9), (1, 3)] {
            let c = synth::conv(&mut rng, "c", ConvKind::Depthwise, [2, 2, k, 1, 2], 4, RequantMode::FixedPoint);
            let mut s = WindowConvStage::new(c, 6, w).unwrap();
            let mut out = Vec::new();
            for _ in 0..6 * w {
                s.fire(&[1, 1], &mut out).unwrap();
            }
            let wp = s.padded_width();
            assert_eq!(wp, w + k - 1);
            assert_eq!(s.first_output_at(), Some(first_output_latency(k, wp)));
        }
    }

    #[test]
    fn window_equals_padded_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, n) = (5, 6, 2);
        let c = synth::conv(&mut rng, "c", ConvKind::Normal, [n, 3, 3, 2, 1], 4, RequantMode::FixedPoint);
        let zx = c.in_spec.z();
        let x = synth::tensor(&mut rng, Shape::new(n, h, w), 4);
        let mut s = WindowConvStage::new(c, h, w).unwrap().with_window_probe();
        let mut out = Vec::new();
        for px in x.to_pixel_major().chunks(n) {
            s.fire(px, &mut out).unwrap();
        }
        let (ho, wo) = s.out_dims();
        assert_eq!(s.probed_windows().len(), ho * wo);
        for (i, win) in s.probed_windows().iter().enumerate() {
            let (oy, ox) = (i / wo, i % wo);
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                    for ch in 0..n {
                        let want = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            0
                        } else {
                            x.at(ch, iy as usize, ix as usize) - zx
                        };
                        assert_eq!(win[(ky * 3 + kx) * n + ch], want, "output {i} tap ({ky},{kx}) ch {ch}");
                    }
                }
            }
        }
    }

    #[test]
    fn pointwise_unit_weight_passes_through() {
        let act = QuantSpec::from_range(-1.0, 1.0, 4, QuantMode::Asymmetric).unwrap();
        let c = QConv {
            name: "pw".into(),
            kind: ConvKind::Pointwise,
            n: 1,
            m: 1,
            k: 1,
            stride: 1,
            groups: 1,
            weights: vec![1],
            w_spec: QuantSpec {
                scale: vec![1.0],
                zero_point: vec![0],
                bw: 4,
                mode: QuantMode::Symmetric,
                granularity: crate::quant::spec::Granularity::PerLayer,
                clip_range: [-7.0, 7.0],
            },
            bias: vec![0],
            in_spec: act.clone(),
            out_spec: act,
            requant: vec![Requantizer::new(1.0, RequantMode::FixedPoint).unwrap()],
            activation: FusedActivation::None,
        };
        let x = Tensor::new(Shape::new(1, 2, 2), vec![0, 5, 9, 15]).unwrap();
        assert_eq!(run(PointwiseStage::new(c, 4, 1).unwrap(), &x), vec![0, 5, 9, 15]);
    }

    #[test]
    fn pointwise_is_parallelism_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = synth::conv(&mut rng, "pw", ConvKind::Pointwise, [8, 16, 1, 1, 1], 4, RequantMode::FixedPoint);
        let x = synth::tensor(&mut rng, Shape::new(8, 4, 4), 4);
        let want = pixel_major(&qconv_ref(&x, &c).unwrap());
        for p in [1, 3, 4, 8] {
            let s = PointwiseStage::new(c.clone(), 16, p).unwrap();
            assert_eq!(run(s, &x), want, "P={p}");
        }
        let mut s = PointwiseStage::new(c, 16, 3).unwrap();
        let mut out = Vec::new();
        s.fire(&x.to_pixel_major()[..8], &mut out).unwrap();
        assert_eq!(s.passes(), 16 * 3);
    }

    #[test]
    fn expansion_then_projection_streams_back_to_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = synth::conv(&mut rng, "e", ConvKind::Pointwise, [4, 12, 1, 1, 1], 4, RequantMode::FixedPoint);
        let mut p = synth::conv(&mut rng, "p", ConvKind::Pointwise, [12, 4, 1, 1, 1], 4, RequantMode::FixedPoint);
        p.in_spec = e.out_spec.clone();
        p.requant = conv_reqs(&p);
        let x = synth::tensor(&mut rng, Shape::new(4, 5, 5), 4);
        let want = qconv_ref(&qconv_ref(&x, &e).unwrap(), &p).unwrap();
        let mut stages: Vec<Box<dyn Stage>> = vec![
            Box::new(PointwiseStage::new(e, 25, 4).unwrap()),
            Box::new(PointwiseStage::new(p, 25, 5).unwrap()),
        ];
        let y = run_round_robin(&mut stages, &x.to_pixel_major(), 12, false).unwrap();
        assert_eq!(y.output, pixel_major(&want));
        assert_eq!(y.stats.transfers, vec![100, 300, 100]);
    }

    #[test]
    fn early_end_of_stream_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = synth::conv(&mut rng, "dw", ConvKind::Depthwise, [2, 2, 3, 1, 2], 4, RequantMode::FixedPoint);
        let mut stages: Vec<Box<dyn Stage>> = vec![Box::new(WindowConvStage::new(c, 4, 4).unwrap())];
        let err = run_round_robin(&mut stages, &[1; 20], 8, false).unwrap_err();
        assert!(matches!(err, Error::Underrun { expected: 32, received: 20, .. }), "{err}");
    }
}
