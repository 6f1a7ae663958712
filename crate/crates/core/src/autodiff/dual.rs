//! Forward-mode dual numbers used inside fused elementwise kernels.
//!
//! Scalar formulas written against [`Real`] can be evaluated either on plain
//! `f64` or on [`Dual`], which carries the partial derivatives with respect
//! to `N` seeded inputs alongside the value.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Minimal real-number interface shared by `f64` and [`Dual`].
pub trait Real:
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
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn recip(self) -> Self;
    fn exp_m1(self) -> Self;
    fn ln_1p(self) -> Self;
    /// Applies a scalar function whose value `f` and derivative `df` at
    /// `self.val()` were computed by the caller.
    fn lift(self, f: f64, df: f64) -> Self;

    /// The larger of two numbers; derivatives follow the selected operand.
    fn max_by_val(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }

    fn min_by_val(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn lift(self, f: f64, _df: f64) -> Self {
        f
    }
}

/// Value plus gradient with respect to `N` inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// Seeds input `i` of `N`.
    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Dual { v, d }
    }

    #[inline]
    fn scaled(self, v: f64, k: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= k;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + o.d[i] * self.v;
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.scaled(-self.v, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Dual {
            v: self.v + o,
            d: self.d,
        }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Dual {
            v: self.v - o,
            d: self.d,
        }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        self.scaled(self.v * o, o)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        self.scaled(self.v / o, 1.0 / o)
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.scaled(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.scaled(self.v.ln(), 1.0 / self.v)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        let r = self.v.powf(p);
        self.scaled(r, p * self.v.powf(p - 1.0))
    }
    #[inline]
    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.scaled(r, -r * r)
    }
    #[inline]
    fn exp_m1(self) -> Self {
        self.scaled(self.v.exp_m1(), self.v.exp())
    }
    #[inline]
    fn ln_1p(self) -> Self {
        self.scaled(self.v.ln_1p(), 1.0 / (1.0 + self.v))
    }
    #[inline]
    fn lift(self, f: f64, df: f64) -> Self {
        self.scaled(f, df)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<R: Real>(x: R, y: R) -> R {
        (x * y + x.exp()).ln() / (y.powf(2.0) + 1.0) - x.recip() + (x * 0.3).exp_m1() * (y * y).ln_1p()
    }

    #[test]
    fn dual_matches_finite_differences() {
        let (x0, y0) = (0.7, -1.3);
        let d = f(Dual::<2>::variable(x0, 0), Dual::<2>::variable(y0, 1));
        let h = 1e-6;
        let fx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let fy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((d.v - f(x0, y0)).abs() < 1e-15);
        assert!((d.d[0] - fx).abs() < 1e-8);
        assert!((d.d[1] - fy).abs() < 1e-8);
    }

    #[test]
    fn max_routes_derivative_to_selected_branch() {
        let a = Dual::<2>::variable(1.0, 0);
        let b = Dual::<2>::variable(2.0, 1);
        assert_eq!(a.max_by_val(b).d, [0.0, 1.0]);
        assert_eq!(a.min_by_val(b).d, [1.0, 0.0]);
    }
}
