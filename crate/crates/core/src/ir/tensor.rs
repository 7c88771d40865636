//! Dense feature-map containers.
//!
//! Tensors are batch-1 and stored channel-major, i.e. `(C, H, W)` row-major.
//! The streaming kernels use a different element order on the wire (see
//! [`crate::kernel::wire`]); conversion helpers live here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial shape of a batch-1 feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Element kind of a tensor, used for validation and blob encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Real,
    /// Unsigned integer restricted to `[0, 2^bits - 1]`.
    Unsigned { bits: u8 },
    /// Signed accumulator, at least 32 bits wide.
    Accumulator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

pub type FloatTensor = Tensor<f32>;
pub type QTensor = Tensor<u8>;
pub type AccTensor = Tensor<i32>;

impl<T: Copy> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixel-major ("HWC") element order: every pixel carries its full
    /// channel column.
    pub fn to_pixel_major(&self) -> Vec<T> {
        let Shape { c, h, w } = self.shape;
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(self.at(ch, y, x));
                }
            }
        }
        out
    }

    pub fn from_pixel_major(shape: Shape, stream: &[T]) -> Result<Self> {
        if stream.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "pixel-major stream for {shape} needs {} elements, got {}",
                shape.len(),
                stream.len()
            )));
        }
        let mut data = stream.to_vec();
        let Shape { c, h, w } = shape;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = stream[(y * w + x) * c + ch];
                }
            }
        }
        Ok(Tensor { shape, data })
    }
}

impl QTensor {
    /// Checks the unsigned-domain invariant for a `bits`-wide tensor.
    pub fn check_domain(&self, bits: u8) -> Result<()> {
        let max = ((1u32 << bits) - 1) as u8;
        if let Some(v) = self.data.iter().find(|&&v| v > max) {
            return Err(Error::Quantization(format!(
                "element {v} outside [0, {max}] for {bits}-bit tensor"
            )));
        }
        Ok(())
    }
}
