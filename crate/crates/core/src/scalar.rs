//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the learners, metrics and decompositions are generic over.
///
/// Implemented for `f32` and `f64`. Model files store values with the
/// shortest round-trip decimal representation of the concrete type, so a
/// saved artifact reloads bit-for-bit.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + std::str::FromStr
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; used for literals and data ingestion.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable log-sum-exp of a slice.
pub fn log_sum_exp<F: Scalar>(values: &[F]) -> F {
    let max = values.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return max;
    }
    let sum: F = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// In-place softmax; returns the log-normalizer.
pub fn softmax_in_place<F: Scalar>(scores: &mut [F]) -> F {
    let lse = log_sum_exp(scores);
    for s in scores.iter_mut() {
        *s = (*s - lse).exp();
    }
    // renormalize so the simplex contract holds to the last ulp or two
    let total: F = scores.iter().copied().sum();
    for s in scores.iter_mut() {
        *s /= total;
    }
    lse
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut s = [0.0f64; 6];
        softmax_in_place(&mut s);
        for p in s {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_handles_large_scores() {
        let mut s = [1000.0f32, 0.0, -1000.0];
        softmax_in_place(&mut s);
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(s.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_tie() {
        assert_eq!(argmax(&[0.2f64, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5f64, 0.5]), 0);
    }
}
