//! Analytical model-size and operation counts.

use std::cmp::Ordering;

use crate::error::Result;
use crate::ir::graph::NetworkGraph;
use crate::ir::shape::{block_shapes, BitWidthMap};

/// Bits in one "Mb" of model size (binary mebibit).
pub const BITS_PER_MB: f64 = (1u64 << 20) as f64;

/// Σ over layers of (weight + bias elements) × weight bit-width. Independent
/// of the input resolution.
pub fn count_params_bits(g: &NetworkGraph, bw: &BitWidthMap) -> Result<u64> {
    let shapes = block_shapes(g, g.input_resolution, bw)?;
    Ok(shapes.iter().map(|b| b.param_bits()).sum())
}

/// Multiply-accumulate count at input resolution `resolution`. Bias adds,
/// requantization, pooling and residual adds are free.
pub fn count_ops(g: &NetworkGraph, resolution: usize) -> Result<u64> {
    let shapes = block_shapes(g, resolution, &BitWidthMap::uniform(8))?;
    Ok(shapes.iter().map(|b| b.macs()).sum())
}

/// Product of model size (bits) and operation count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complexity(pub f64);

impl Complexity {
    pub fn new(params_bits: u64, ops: u64) -> Self {
        Complexity(params_bits as f64 * ops as f64)
    }

    /// Value in Mb × M-ops.
    pub fn mb_mops(&self) -> f64 {
        self.0 / BITS_PER_MB / 1e6
    }
}

impl Eq for Complexity {}

impl PartialOrd for Complexity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Complexity {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

pub fn network_complexity(g: &NetworkGraph, bw: &BitWidthMap, resolution: usize) -> Result<Complexity> {
    Ok(Complexity::new(count_params_bits(g, bw)?, count_ops(g, resolution)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::zoo;

    #[test]
    fn zero_params_zero_complexity() {
        assert_eq!(Complexity::new(0, 12345).0, 0.0);
    }

    #[test]
    fn equal_products_tie() {
        assert_eq!(Complexity::new(6, 10).cmp(&Complexity::new(10, 6)), Ordering::Equal);
        assert!(Complexity::new(6, 11) > Complexity::new(10, 6));
    }

    #[test]
    fn params_constant_across_resolution() {
        let g = zoo::mobilenet_v2(0.5, 224, None).unwrap();
        let bw = BitWidthMap::deployment(&g, 4);
        let mut prev = None;
        for h in [96, 128, 160, 192, 224] {
            let mut gh = g.clone();
            gh.input_resolution = h;
            let p = count_params_bits(&gh, &bw).unwrap();
            if let Some(q) = prev {
                assert_eq!(p, q);
            }
            prev = Some(p);
        }
    }

    #[test]
    fn ops_monotone_in_resolution_and_alpha() {
        let mut last = 0;
        for h in [96, 128, 160, 192, 224] {
            let g = zoo::mobilenet_v2(0.75, h, None).unwrap();
            let ops = count_ops(&g, h).unwrap();
            assert!(ops > last);
            last = ops;
        }
        let mut last = 0;
        for a in [0.35, 0.5, 0.75, 1.0] {
            let g = zoo::mobilenet_v2(a, 160, None).unwrap();
            let ops = count_ops(&g, 160).unwrap();
            assert!(ops > last);
            last = ops;
        }
    }
}
