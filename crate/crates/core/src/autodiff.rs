//! Second-order forward-mode automatic differentiation over a small, fixed
//! number of inputs.
//!
//! Transition densities and the CTCRW filter step are written once, generic
//! over [`Real`], and evaluated either on plain `f64` or on [`HyperDual`] to
//! obtain exact local gradients and Hessians with respect to the linear
//! predictors.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar operations needed by the generic likelihood code.
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
    fn cst(x: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn exp_m1(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Value, gradient and Hessian of a scalar function of `N` inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperDual<const N: usize> {
    pub v: f64,
    pub g: [f64; N],
    pub h: [[f64; N]; N],
}

impl<const N: usize> HyperDual<N> {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            g: [0.0; N],
            h: [[0.0; N]; N],
        }
    }

    /// The `i`-th independent variable, evaluated at `v`.
    pub fn variable(v: f64, i: usize) -> Self {
        let mut d = Self::constant(v);
        d.g[i] = 1.0;
        d
    }

    /// Apply a scalar function with value `f`, first derivative `d1` and
    /// second derivative `d2` at `self.v`.
    #[inline]
    fn chain(self, f: f64, d1: f64, d2: f64) -> Self {
        let mut out = Self::constant(f);
        for i in 0..N {
            out.g[i] = d1 * self.g[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.h[i][j] = d1 * self.h[i][j] + d2 * self.g[i] * self.g[j];
            }
        }
        out
    }

    fn recip(self) -> Self {
        let inv = 1.0 / self.v;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl<const N: usize> Add for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for i in 0..N {
            self.g[i] += rhs.g[i];
            for j in 0..N {
                self.h[i][j] += rhs.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for i in 0..N {
            self.g[i] -= rhs.g[i];
            for j in 0..N {
                self.h[i][j] -= rhs.h[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Mul for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::constant(self.v * rhs.v);
        for i in 0..N {
            out.g[i] = self.v * rhs.g[i] + rhs.v * self.g[i];
        }
        for i in 0..N {
            for j in 0..N {
                out.h[i][j] = self.v * rhs.h[i][j]
                    + rhs.v * self.h[i][j]
                    + self.g[i] * rhs.g[j]
                    + rhs.g[i] * self.g[j];
            }
        }
        out
    }
}

impl<const N: usize> Div for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        self * rhs.recip()
    }
}

impl<const N: usize> Neg for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl<const N: usize> Add<f64> for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.v += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.v -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.v *= rhs;
        for i in 0..N {
            self.g[i] *= rhs;
            for j in 0..N {
                self.h[i][j] *= rhs;
            }
        }
        self
    }
}

impl<const N: usize> Div<f64> for HyperDual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> Real for HyperDual<N> {
    fn cst(x: f64) -> Self {
        Self::constant(x)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn exp_m1(self) -> Self {
        let e = self.v.exp();
        self.chain(self.v.exp_m1(), e, e)
    }
    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        self.chain(self.v.ln(), inv, -inv * inv)
    }
    fn ln_1p(self) -> Self {
        let inv = 1.0 / (1.0 + self.v);
        self.chain(self.v.ln_1p(), inv, -inv * inv)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s, -0.25 / (s * self.v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<R: Real>(x: R, y: R) -> R {
        (x * y).exp() / (y.square() + 1.0) + (x + 2.0).ln().sqrt() - x.exp_m1() * y
    }

    #[test]
    fn derivatives_match_central_differences() {
        let (x0, y0) = (0.3, -0.7);
        let d = f(HyperDual::<2>::variable(x0, 0), HyperDual::<2>::variable(y0, 1));
        assert!((d.v - f(x0, y0)).abs() < 1e-14);
        let h = 1e-5;
        let gx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let gy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((d.g[0] - gx).abs() < 1e-8);
        assert!((d.g[1] - gy).abs() < 1e-8);
        let h = 1e-4;
        let hxy = (f(x0 + h, y0 + h) - f(x0 + h, y0 - h) - f(x0 - h, y0 + h) + f(x0 - h, y0 - h))
            / (4.0 * h * h);
        let hxx = (f(x0 + h, y0) - 2.0 * f(x0, y0) + f(x0 - h, y0)) / (h * h);
        assert!((d.h[0][1] - hxy).abs() < 1e-5);
        assert!((d.h[1][0] - hxy).abs() < 1e-5);
        assert!((d.h[0][0] - hxx).abs() < 1e-5);
    }

    #[test]
    fn ln_1p_and_division() {
        let x = HyperDual::<1>::variable(0.5, 0);
        let y = (x.ln_1p() / x).value();
        assert!((y - 1.5f64.ln() / 0.5).abs() < 1e-15);
    }
}
