//! Exact sums of squared floats.
//!
//! Every finite `f64` is a dyadic rational, so sums of squares of floats are
//! dyadic rationals too. [`SquareSum`] keeps them exactly as `mantissa * 2^exp`
//! with a big unsigned mantissa.

use std::cmp::Ordering;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

#[derive(Clone, Debug)]
pub struct SquareSum {
    mantissa: BigUint,
    exp: i64,
}

/// `x = m * 2^e` with integer `m >= 0`.
fn decode(x: f64) -> (u64, i64) {
    let bits = x.abs().to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    }
}

impl SquareSum {
    pub fn zero() -> Self {
        SquareSum { mantissa: BigUint::zero(), exp: 0 }
    }

    /// `x^2`, exact. Panics on non-finite input.
    pub fn square(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite coefficient");
        let (m, e) = decode(x);
        if m == 0 {
            return Self::zero();
        }
        let m = BigUint::from(m);
        SquareSum { mantissa: &m * &m, exp: 2 * e }
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa.is_zero()
    }

    fn aligned(&self, exp: i64) -> BigUint {
        &self.mantissa << ((self.exp - exp) as usize)
    }

    pub fn add(&self, other: &SquareSum) -> SquareSum {
        if self.is_zero() {
            return other.clone();
        }
        if other.is_zero() {
            return self.clone();
        }
        let e = self.exp.min(other.exp);
        SquareSum { mantissa: self.aligned(e) + other.aligned(e), exp: e }
    }

    /// Nearest float (ties to even) in the normal range.
    pub fn to_f64(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let bits = self.mantissa.bits() as i64;
        // Keep the top 64 bits so the float conversion sees a u64; a sticky low bit
        // stands in for the dropped ones so ties still round correctly.
        let drop = (bits - 64).max(0);
        let mut top = (&self.mantissa >> (drop as usize)).to_u64().expect("fits in 64 bits");
        if drop > 0 && self.mantissa.trailing_zeros().is_some_and(|z| (z as i64) < drop) {
            top |= 1;
        }
        let mut v = top as f64;
        let mut e = self.exp + drop;
        while e > 0 {
            let step = e.min(1000);
            v *= 2f64.powi(step as i32);
            e -= step;
        }
        while e < 0 {
            let step = (-e).min(1000);
            v *= 2f64.powi(-(step as i32));
            e += step;
        }
        v
    }

    pub fn sqrt_f64(&self) -> f64 {
        self.to_f64().sqrt()
    }
}

impl PartialEq for SquareSum {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SquareSum {}

impl PartialOrd for SquareSum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SquareSum {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.is_zero(), other.is_zero()) {
            (true, true) => return Ordering::Equal,
            (true, false) => return Ordering::Less,
            (false, true) => return Ordering::Greater,
            _ => {}
        }
        let e = self.exp.min(other.exp);
        self.aligned(e).cmp(&other.aligned(e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squares_and_sums() {
        let a = SquareSum::square(0.5);
        assert_eq!(a.to_f64(), 0.25);
        let b = SquareSum::square(-3.0);
        assert_eq!(a.add(&b).to_f64(), 9.25);
        assert!(a < b);
        assert_eq!(SquareSum::square(0.0), SquareSum::zero());
    }

    #[test]
    fn catches_float_rounding() {
        // 0.1^2 + 0.2^2 differs from 0.3^2 exactly, and from the float sums.
        let x = SquareSum::square(0.1).add(&SquareSum::square(0.2));
        let y = SquareSum::square(0.3);
        assert_ne!(x, y);
        let tiny = SquareSum::square(1e-300).add(&SquareSum::square(1.0));
        assert!(tiny > SquareSum::square(1.0));
    }

    #[test]
    fn subnormals_decode() {
        let s = SquareSum::square(f64::from_bits(1));
        assert!(!s.is_zero());
        assert_eq!(s.to_f64(), 0.0);
    }
}
