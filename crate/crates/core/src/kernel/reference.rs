//! Naive nested-loop reference operators. These are the oracles the
//! streaming stages are checked against.

use std::ops::{Add, Mul};

use crate::error::{Error, Result};
use crate::ir::tensor::{Shape, Tensor};
use crate::quant::qnet::{pool_mean, QConv, QDense, QNet, QOp, QResidual, QSqueezeExcite};

/// Element types the reference convolution runs on, with the wider type
/// used for accumulation.
pub trait ConvElem: Copy + Default + Send + Sync {
    type Acc: Copy + Default + Add<Output = Self::Acc> + Mul<Output = Self::Acc> + Send + Sync;
    fn widen(self) -> Self::Acc;
}

impl ConvElem for i32 {
    type Acc = i64;
    fn widen(self) -> i64 {
        self as i64
    }
}

impl ConvElem for f32 {
    type Acc = f64;
    fn widen(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub m: usize,
    pub k: usize,
    pub stride: usize,
    pub groups: usize,
}

/// Same-padded (zero) convolution. Weights `(M, N/G, K, K)`, bias `M`.
///
/// Normal, group, depthwise (`G = N = M`) and pointwise (`K = 1`)
/// convolutions are all instances.
pub fn ref_conv<T: ConvElem>(
    input: &Tensor<T>,
    weights: &[T],
    bias: &[T::Acc],
    g: ConvGeometry,
) -> Result<Tensor<T::Acc>> {
    let Shape { c: n, h, w } = input.shape();
    if g.groups == 0 || n % g.groups != 0 || !g.m.is_multiple_of(g.groups) || g.k.is_multiple_of(2) || g.stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "invalid geometry N={n} M={} K={} stride={} G={}",
            g.m, g.k, g.stride, g.groups
        )));
    }
    let gw = n / g.groups;
    let mpg = g.m / g.groups;
    if weights.len() != g.m * gw * g.k * g.k || bias.len() != g.m {
        return Err(Error::ShapeMismatch(format!(
            "weights {} / bias {} do not fit M={} N/G={gw} K={}",
            weights.len(),
            bias.len(),
            g.m,
            g.k
        )));
    }
    let p = (g.k - 1) / 2;
    let (ho, wo) = (h.div_ceil(g.stride), w.div_ceil(g.stride));
    let mut out = Tensor::filled(Shape::new(g.m, ho, wo), T::Acc::default());
    for m in 0..g.m {
        let grp = m / mpg;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[m];
                for i in 0..gw {
                    let ch = grp * gw + i;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wv = weights[((m * gw + i) * g.k + ky) * g.k + kx];
                            acc = acc + input.at(ch, iy as usize, ix as usize).widen() * wv.widen();
                        }
                    }
                }
                out.set(m, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Integer convolution followed by approximate-and-clip.
pub fn qconv_ref(x: &Tensor<i32>, c: &QConv) -> Result<Tensor<i32>> {
    if x.shape().c != c.n {
        return Err(Error::ShapeMismatch(format!("{}: input {} vs N={}", c.name, x.shape(), c.n)));
    }
    let zx = c.in_spec.z();
    let centered = x.map(|v| v - zx);
    let per = c.group_width() * c.k * c.k;
    let w: Vec<i32> = c
        .weights
        .iter()
        .enumerate()
        .map(|(i, &v)| v - c.w_zero(i / per))
        .collect();
    let bias: Vec<i64> = c.bias.iter().map(|&b| b as i64).collect();
    let acc = ref_conv(
        &centered,
        &w,
        &bias,
        ConvGeometry {
            m: c.m,
            k: c.k,
            stride: c.stride,
            groups: c.groups,
        },
    )?;
    let bound = c.acc_bound();
    let px = acc.shape().pixels();
    let mut out = Vec::with_capacity(acc.data().len());
    for (i, &a) in acc.data().iter().enumerate() {
        if a.abs() > bound {
            return Err(Error::AccumulatorOverflow(format!("{}: |{a}| > {bound}", c.name)));
        }
        out.push(c.clip(a, i / px));
    }
    Tensor::new(acc.shape(), out)
}

pub fn avg_pool_ref(x: &Tensor<i32>) -> Tensor<i32> {
    let s = x.shape();
    let n = s.pixels() as i64;
    let means = (0..s.c)
        .map(|c| {
            let mut sum = 0i64;
            for y in 0..s.h {
                for xx in 0..s.w {
                    sum += x.at(c, y, xx) as i64;
                }
            }
            pool_mean(sum, n)
        })
        .collect();
    Tensor::new(Shape::new(s.c, 1, 1), means).expect("length matches")
}

pub fn se_ref(x: &Tensor<i32>, se: &QSqueezeExcite) -> Result<Tensor<i32>> {
    let s = x.shape();
    if s.c != se.channels {
        return Err(Error::ShapeMismatch(format!("{}: input {} vs C={}", se.name, s, se.channels)));
    }
    let pooled = avg_pool_ref(x);
    let squeezed = qconv_ref(&pooled, &se.squeeze)?;
    let zs = se.excite.in_spec.z();
    let mut out = x.clone();
    for c in 0..s.c {
        let zw = se.excite.w_zero(c);
        let mut acc = se.excite.bias[c] as i64;
        for j in 0..se.squeeze.m {
            acc += (squeezed.data()[j] - zs) as i64 * (se.excite.weights[c * se.squeeze.m + j] - zw) as i64;
        }
        let t = se.gate(acc, c);
        for y in 0..s.h {
            for xx in 0..s.w {
                out.set(c, y, xx, se.scale(x.at(c, y, xx), t));
            }
        }
    }
    Ok(out)
}

pub fn residual_ref(a: &Tensor<i32>, b: &Tensor<i32>, r: &QResidual) -> Result<Tensor<i32>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{}: {} vs {}", r.name, a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| r.combine(p, q)).collect();
    Tensor::new(a.shape(), data)
}

/// Classifier logits as 32-bit accumulators.
pub fn dense_ref(x: &Tensor<i32>, d: &QDense) -> Result<Vec<i32>> {
    if x.shape().len() != d.n {
        return Err(Error::ShapeMismatch(format!("{}: input {} vs N={}", d.name, x.shape(), d.n)));
    }
    let zx = d.in_spec.z();
    Ok((0..d.m)
        .map(|m| {
            let zw = d.w_spec.channel(m).zero_point;
            let mut acc = d.bias[m] as i64;
            for i in 0..d.n {
                acc += (x.data()[i] - zx) as i64 * (d.weights[m * d.n + i] - zw) as i64;
            }
            acc as i32
        })
        .collect())
}

/// Layer-by-layer integer forward pass over a whole network. Returns the
/// final tensor in pixel-major order (logits for a classifier).
pub fn qnet_ref(q: &QNet, input: &Tensor<i32>) -> Result<Vec<i32>> {
    if input.shape() != q.input_shape() {
        return Err(Error::ShapeMismatch(format!("input {} vs {}", input.shape(), q.input_shape())));
    }
    let mut cur = input.clone();
    for block in &q.blocks {
        let block_in = cur.clone();
        for op in &block.ops {
            cur = match op {
                QOp::Conv(c) => qconv_ref(&cur, c)?,
                QOp::AvgPool(_) => avg_pool_ref(&cur),
                QOp::SqueezeExcite(se) => se_ref(&cur, se)?,
                QOp::ResidualAdd(r) => residual_ref(&block_in, &cur, r)?,
                QOp::Dense(d) => {
                    let logits = dense_ref(&cur, d)?;
                    Tensor::new(Shape::new(d.m, 1, 1), logits)?
                }
            };
        }
    }
    Ok(cur.to_pixel_major())
}
