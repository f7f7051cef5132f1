use std::ops::{Add, Div, Mul, Neg, Sub};

/// Real-number-like type the generic numerical code is written against.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Sum of a sequence of scalars, left to right.
pub fn sum<T: Scalar>(items: impl IntoIterator<Item = T>) -> T {
    let mut acc = T::zero();
    let mut first = true;
    for v in items {
        if first {
            acc = v;
            first = false;
        } else {
            acc = acc + v;
        }
    }
    acc
}
