use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Scalar;

/// Order-2 jet along one input coordinate: value, first and second derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet2<T = f64> {
    pub v: T,
    pub d1: T,
    pub d2: T,
}

impl<T: Scalar> Jet2<T> {
    pub fn new(v: T, d1: T, d2: T) -> Self {
        Jet2 { v, d1, d2 }
    }

    pub fn constant(v: T) -> Self {
        Jet2 { v, d1: T::zero(), d2: T::zero() }
    }

    /// The coordinate itself: derivative one, curvature zero.
    pub fn variable(v: T) -> Self {
        Jet2 { v, d1: T::cst(1.0), d2: T::zero() }
    }

    pub fn scale(self, c: f64) -> Self {
        Jet2 { v: self.v * c, d1: self.d1 * c, d2: self.d2 * c }
    }

    pub fn add_const(self, c: T) -> Self {
        Jet2 { v: self.v + c, ..self }
    }

    pub fn sin(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        Jet2 {
            v: s,
            d1: c * self.d1,
            d2: c * self.d2 - s * self.d1 * self.d1,
        }
    }

    pub fn cos(self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        Jet2 {
            v: c,
            d1: -(s * self.d1),
            d2: -(s * self.d2) - c * self.d1 * self.d1,
        }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        Jet2 {
            v: e,
            d1: e * self.d1,
            d2: e * (self.d2 + self.d1 * self.d1),
        }
    }

    pub fn ln(self) -> Self {
        let r = T::cst(1.0) / self.v;
        Jet2 {
            v: self.v.ln(),
            d1: self.d1 * r,
            d2: self.d2 * r - self.d1 * self.d1 * r * r,
        }
    }

    pub fn recip(self) -> Self {
        let r = T::cst(1.0) / self.v;
        let d1 = -(self.d1 * r * r);
        Jet2 {
            v: r,
            d1,
            d2: -(self.d2 * r * r) + self.d1 * self.d1 * r * r * r * 2.0,
        }
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let d1 = self.d1 / (s * 2.0);
        Jet2 {
            v: s,
            d1,
            d2: self.d2 / (s * 2.0) - self.d1 * self.d1 / (s * s * s * 4.0),
        }
    }
}

impl<T: Scalar> Add for Jet2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Jet2 { v: self.v + o.v, d1: self.d1 + o.d1, d2: self.d2 + o.d2 }
    }
}

impl<T: Scalar> Sub for Jet2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Jet2 { v: self.v - o.v, d1: self.d1 - o.d1, d2: self.d2 - o.d2 }
    }
}

impl<T: Scalar> Mul for Jet2<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Jet2 {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + self.d1 * o.d1 * 2.0 + self.v * o.d2,
        }
    }
}

impl<T: Scalar> Div for Jet2<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.v / rhs.v;
        let q1 = (self.d1 - q * rhs.d1) / rhs.v;
        let q2 = (self.d2 - q1 * rhs.d1 * 2.0 - q * rhs.d2) / rhs.v;
        Jet2 { v: q, d1: q1, d2: q2 }
    }
}

impl<T: Scalar> Neg for Jet2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Jet2 { v: -self.v, d1: -self.d1, d2: -self.d2 }
    }
}

/// Primitive operations understood by [`jet_propagate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JetOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Recip,
}

impl JetOp {
    pub fn arity(self) -> usize {
        match self {
            JetOp::Add | JetOp::Sub | JetOp::Mul | JetOp::Div => 2,
            _ => 1,
        }
    }
}

/// Applies one primitive to jets.
///
/// Panics if `inputs` does not hold exactly `op.arity()` jets.
pub fn jet_propagate<T: Scalar>(op: JetOp, inputs: &[Jet2<T>]) -> Jet2<T> {
    assert_eq!(inputs.len(), op.arity(), "wrong number of jets for {op:?}");
    let a = inputs[0];
    match op {
        JetOp::Add => a + inputs[1],
        JetOp::Sub => a - inputs[1],
        JetOp::Mul => a * inputs[1],
        JetOp::Div => a / inputs[1],
        JetOp::Neg => -a,
        JetOp::Scale(c) => a.scale(c),
        JetOp::Sin => a.sin(),
        JetOp::Cos => a.cos(),
        JetOp::Exp => a.exp(),
        JetOp::Ln => a.ln(),
        JetOp::Sqrt => a.sqrt(),
        JetOp::Recip => a.recip(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Jet2, b: Jet2, tol: f64) -> bool {
        (a.v - b.v).abs() <= tol && (a.d1 - b.d1).abs() <= tol && (a.d2 - b.d2).abs() <= tol
    }

    #[test]
    fn sin_at_zero() {
        let j = jet_propagate(JetOp::Sin, &[Jet2::new(0.0, 1.0, 0.0)]);
        assert_eq!(j, Jet2::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn product_with_constant() {
        let j = jet_propagate(JetOp::Mul, &[Jet2::new(2.0, 1.0, 0.0), Jet2::new(3.0, 0.0, 0.0)]);
        assert_eq!(j, Jet2::new(6.0, 3.0, 0.0));
    }

    #[test]
    fn sin_at_half_pi() {
        let j = jet_propagate(JetOp::Sin, &[Jet2::new(FRAC_PI_2, 1.0, 0.0)]);
        assert!(close(j, Jet2::new(1.0, 0.0, -1.0), 1e-15));
    }

    // f(x) = sin(x)·exp(x) / (1 + x²), derivatives by hand.
    #[test]
    fn composite_matches_closed_form() {
        let x0 = 0.7;
        let x = Jet2::variable(x0);
        let num = x.sin() * x.exp();
        let den = x * x + Jet2::constant(1.0);
        let f = num / den;
        let h = 1e-4;
        let g = |x: f64| x.sin() * x.exp() / (1.0 + x * x);
        let d1 = (g(x0 + h) - g(x0 - h)) / (2.0 * h);
        let d2 = (g(x0 + h) - 2.0 * g(x0) + g(x0 - h)) / (h * h);
        assert!((f.v - g(x0)).abs() < 1e-15);
        assert!((f.d1 - d1).abs() < 1e-7);
        assert!((f.d2 - d2).abs() < 1e-5);
    }

    #[test]
    fn composition_equals_expanded_form() {
        // sin(2x)  vs  2 sin(x) cos(x)
        for &x0 in &[-1.3, 0.1, 0.9, 2.4] {
            let x = Jet2::new(x0, 0.6, -0.2);
            let a = x.scale(2.0).sin();
            let b = (x.sin() * x.cos()).scale(2.0);
            assert!(close(a, b, 1e-12), "{a:?} {b:?}");
            // exp(ln(x)) vs x for positive x
            let p = Jet2::new(x0.abs() + 0.5, 0.3, 0.7);
            assert!(close(p.ln().exp(), p, 1e-12));
            // sqrt(x)^2 vs x
            let s = p.sqrt();
            assert!(close(s * s, p, 1e-12));
            assert!(close(p.recip() * p, Jet2::constant(1.0), 1e-12));
        }
    }
}
