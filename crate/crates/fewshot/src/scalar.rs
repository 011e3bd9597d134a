//! Scalar abstraction over `f64` and forward-mode dual numbers.
//!
//! All layer math is generic over [`Scalar`]. Running the forward and
//! backward passes with [`Dual`] values whose tangents hold a direction
//! vector yields the exact directional derivative of the gradient, i.e.
//! a Hessian-vector product. That is what the exact second-order
//! meta-gradient mode is built on; plain training uses `f64`.

use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + num_traits::Zero
    + num_traits::One
    + ndarray::LinalgScalar
{
    fn from_f64(v: f64) -> Self;
    /// Primal part (drops any tangent).
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// First-order dual number `re + dx·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dual {
    pub re: f64,
    pub dx: f64,
}

impl Dual {
    pub fn new(re: f64, dx: f64) -> Self {
        Self { re, dx }
    }

    pub fn constant(re: f64) -> Self {
        Self { re, dx: 0.0 }
    }
}

// Comparisons act on the primal part only, so branch decisions (ReLU
// masks, pooling argmax, softmax max-shift) agree with the f64 path.
impl PartialEq for Dual {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl PartialOrd for Dual {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.dx + o.dx)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.dx - o.dx)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.dx + self.dx * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.re / o.re,
            (self.dx * o.re - self.re * o.dx) / (o.re * o.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.dx)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl DivAssign for Dual {
    fn div_assign(&mut self, o: Dual) {
        *self = *self / o;
    }
}

impl Sum for Dual {
    fn sum<I: Iterator<Item = Dual>>(iter: I) -> Dual {
        iter.fold(Dual::constant(0.0), |a, b| a + b)
    }
}

impl num_traits::Zero for Dual {
    fn zero() -> Self {
        Dual::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.dx == 0.0
    }
}

impl num_traits::One for Dual {
    fn one() -> Self {
        Dual::constant(1.0)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual::new(r, self.dx / (2.0 * r))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.dx)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.dx / self.re)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(re: f64, dx: f64) -> Dual {
        Dual::new(re, dx)
    }

    #[test]
    fn dual_chain_rule_matches_hand_derivative() {
        // f(x) = exp(sqrt(x)) * ln(x) at x = 2 with dx = 1
        let x = d(2.0, 1.0);
        let f = x.sqrt().exp() * x.ln();
        let s = 2.0_f64.sqrt();
        let expect = s.exp() * (2.0_f64.ln() / (2.0 * s) + 1.0 / 2.0);
        assert!((f.dx - expect).abs() < 1e-12);
    }

    #[test]
    fn dual_division_rule() {
        // (x/y)' with x=(3,1), y=(2,0.5): (1*2 - 3*0.5)/4 = 0.125
        let q = d(3.0, 1.0) / d(2.0, 0.5);
        assert!((q.re - 1.5).abs() < 1e-15);
        assert!((q.dx - 0.125).abs() < 1e-15);
    }

    #[test]
    fn comparisons_ignore_tangent() {
        assert!(d(1.0, -5.0) < d(2.0, 100.0));
        assert!(d(1.0, -5.0) == d(1.0, 3.0));
    }
}
