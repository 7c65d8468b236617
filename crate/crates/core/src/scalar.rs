//! Floating-point abstraction shared by the scoring and ranking code.
//!
//! Every score path is generic over [`Scalar`]; `f64` is the working precision
//! used by the loaders, the oracle and the CLI, `f32` is available for callers
//! that already hold single-precision model outputs.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Neumaier-compensated summation.
pub fn compensated_sum<S: Scalar, I: IntoIterator<Item = S>>(values: I) -> S {
    let mut sum = S::zero();
    let mut comp = S::zero();
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated arithmetic mean; `None` for an empty input.
pub fn compensated_mean<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() {
        return None;
    }
    let n = S::from_usize(values.len())?;
    Some(compensated_sum(values.iter().copied()) / n)
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp<S: Scalar>(a: S, b: S) -> S {
    if a == S::neg_infinity() && b == S::neg_infinity() {
        return S::neg_infinity();
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `log Σ_i w_i exp(x_i)`; uniform weights `1/n` when `weights` is `None`.
///
/// Returns `None` for an empty input.
pub fn log_weighted_mean_exp<S: Scalar>(xs: &[S], weights: Option<&[S]>) -> Option<S> {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if xs.is_empty() {
        return None;
    }
    if max == S::neg_infinity() {
        return Some(max);
    }
    let n = S::from_usize(xs.len())?;
    let acc = match weights {
        Some(w) => compensated_sum(xs.iter().zip(w).map(|(&x, &w)| w * (x - max).exp())),
        None => compensated_sum(xs.iter().map(|&x| (x - max).exp())) / n,
    };
    Some(max + acc.ln())
}

/// Logistic sigmoid evaluated without overflow for large `|z|`.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}
