//! Floating-point abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by models, losses and optimizers: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-when-possible conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Widening conversion used for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    /// Smallest value a probability is clamped to before taking a logarithm.
    fn prob_floor() -> Self {
        Self::of(1e-300).max(Self::min_positive_value())
    }

    /// Tolerance for "sums to one" checks, scaled to the type's precision.
    fn simplex_tol(len: usize) -> Self {
        let eps = Self::epsilon() * Self::of(4.0 * len.max(1) as f64);
        eps.max(Self::of(1e-12))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Mean of `values` computed as `v0 + Σ(v − v0)/n`.
///
/// Equal inputs yield exactly that value, which the ensemble and ledger code
/// rely on for bitwise reductions.
pub fn shifted_mean<F: Scalar>(values: impl IntoIterator<Item = F>) -> Option<F> {
    let mut iter = values.into_iter();
    let first = iter.next()?;
    let mut n = 1usize;
    let mut acc = F::zero();
    for v in iter {
        acc += v - first;
        n += 1;
    }
    Some(first + acc / F::of(n as f64))
}

/// Population variance about a shifted mean; exactly zero for equal inputs.
pub fn shifted_variance<F: Scalar>(values: &[F]) -> Option<F> {
    let mean = shifted_mean(values.iter().copied())?;
    let n = F::of(values.len() as f64);
    Some(values.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n)
}
