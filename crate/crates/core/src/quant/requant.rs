//! Requantization of integer accumulators ("approximate and clip").

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RequantMode {
    /// 31-bit mantissa and arithmetic right shift.
    #[default]
    FixedPoint,
    /// Double-precision multiply, for comparison.
    Real,
}

impl RequantMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RequantMode::FixedPoint => "fixed_point",
            RequantMode::Real => "real",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed_point" => Ok(RequantMode::FixedPoint),
            "real" => Ok(RequantMode::Real),
            other => Err(Error::Quantization(format!("unknown requantization mode `{other}`"))),
        }
    }
}

/// Largest right shift kept; smaller multipliers round every 32-bit
/// accumulator to zero anyway.
pub const MAX_SHIFT: i32 = 62;

/// A real multiplier `M` realized either as `mantissa · 2^-shift` with
/// `mantissa ∈ [2^30, 2^31)` or as a plain double.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Requantizer {
    Fixed { mantissa: i32, shift: i32 },
    Real(f64),
}

/// `round(v / 2^shift)` with ties away from zero; negative shifts scale up.
#[inline]
pub fn round_shift(v: i128, shift: i32) -> i128 {
    if shift <= 0 {
        return v << (-shift) as u32;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

impl Requantizer {
    pub fn new(m: f64, mode: RequantMode) -> Result<Self> {
        if !(m >= 0.0) || !m.is_finite() {
            return Err(Error::Quantization(format!("requantization multiplier {m} is not a finite non-negative real")));
        }
        match mode {
            RequantMode::Real => Ok(Requantizer::Real(m)),
            RequantMode::FixedPoint => Requantizer::fixed(m),
        }
    }

    fn fixed(m: f64) -> Result<Self> {
        if m == 0.0 {
            return Ok(Requantizer::Fixed { mantissa: 0, shift: 0 });
        }
        let mut e = m.log2().floor() as i32;
        let scaled = |e: i32| m * 2f64.powi(30 - e);
        while scaled(e) >= (1u64 << 31) as f64 {
            e += 1;
        }
        while scaled(e) < (1u64 << 30) as f64 {
            e -= 1;
        }
        let mut mantissa = scaled(e).round() as i64;
        if mantissa == 1 << 31 {
            mantissa >>= 1;
            e += 1;
        }
        let shift = 30 - e;
        if shift > MAX_SHIFT {
            return Ok(Requantizer::Fixed { mantissa: 0, shift: 0 });
        }
        if shift < -31 {
            return Err(Error::Quantization(format!("requantization multiplier {m} too large")));
        }
        Ok(Requantizer::Fixed {
            mantissa: mantissa as i32,
            shift,
        })
    }

    /// `round(acc · M)`.
    #[inline]
    pub fn apply(&self, acc: i64) -> i64 {
        match *self {
            Requantizer::Fixed { mantissa, shift } => round_shift(acc as i128 * mantissa as i128, shift) as i64,
            Requantizer::Real(m) => (acc as f64 * m).round() as i64,
        }
    }

    /// The multiplier actually applied.
    pub fn multiplier(&self) -> f64 {
        match *self {
            Requantizer::Fixed { mantissa, shift } => mantissa as f64 * 2f64.powi(-shift),
            Requantizer::Real(m) => m,
        }
    }

    pub fn mode(&self) -> RequantMode {
        match self {
            Requantizer::Fixed { .. } => RequantMode::FixedPoint,
            Requantizer::Real(_) => RequantMode::Real,
        }
    }
}

/// `clamp(round(acc · M) + z_out, 0, qmax)`. The lower clamp doubles as the
/// ReLU, the upper one as the ReLU6 cap.
#[inline]
pub fn approximate_and_clip(acc: i64, rq: &Requantizer, z_out: i32, qmax: i32) -> i32 {
    (rq.apply(acc) + z_out as i64).clamp(0, qmax as i64) as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_shift_ties_away_from_zero() {
        assert_eq!(round_shift(5, 1), 3);
        assert_eq!(round_shift(-5, 1), -3);
        assert_eq!(round_shift(4, 1), 2);
        assert_eq!(round_shift(-7, 2), -2);
        assert_eq!(round_shift(3, -2), 12);
    }

    #[test]
    fn mantissa_is_normalized() {
        for m in [1e-9, 0.0003, 0.37, 0.5, 1.0, 1.999_999_9, 7.25, 1000.0] {
            let Requantizer::Fixed { mantissa, shift } = Requantizer::new(m, RequantMode::FixedPoint).unwrap() else {
                panic!()
            };
            assert!((1 << 30..1i64 << 31).contains(&(mantissa as i64)), "{m}: {mantissa}");
            let back = mantissa as f64 * 2f64.powi(-shift);
            assert!((back / m - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn acc_zero_gives_zero_point() {
        let rq = Requantizer::new(0.013, RequantMode::FixedPoint).unwrap();
        assert_eq!(approximate_and_clip(0, &rq, 7, 15), 7);
        assert_eq!(approximate_and_clip(1 << 30, &rq, 7, 15), 15);
        assert_eq!(approximate_and_clip(-(1 << 30), &rq, 7, 15), 0);
    }

    #[test]
    fn tiny_multiplier_rounds_to_zero() {
        let rq = Requantizer::new(1e-30, RequantMode::FixedPoint).unwrap();
        assert_eq!(rq.apply(i32::MAX as i64), 0);
    }

    #[test]
    fn fixed_point_within_one_lsb_of_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mismatches = 0;
        for _ in 0..10_000 {
            let m = 10f64.powf(rng.gen_range(-6.0..0.5));
            let acc: i64 = rng.gen_range(-(1i64 << 24)..(1i64 << 24));
            let f = Requantizer::new(m, RequantMode::FixedPoint).unwrap().apply(acc);
            let r = Requantizer::new(m, RequantMode::Real).unwrap().apply(acc);
            assert!((f - r).abs() <= 1, "m={m} acc={acc}: {f} vs {r}");
            mismatches += (f != r) as usize;
        }
        println!("fixed vs real requantization mismatch rate: {:.4}%", mismatches as f64 / 100.0);
    }
}
