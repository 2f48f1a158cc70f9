//! Vector-mode forward differentiation on fixed-width dual numbers.
//!
//! A [`Dual<K>`] carries a value and `K` directional derivatives through
//! arbitrary arithmetic written against the [`Real`] trait. Dense Jacobians
//! of small maps come out of [`dense_jacobian`], which seeds identity
//! directions in chunks of `K`, so maps with more than `K` inputs simply run
//! multiple passes.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar abstraction implemented by `f64` (values only) and [`Dual`]
/// (values plus derivatives).
pub trait Real:
    Copy
    + Clone
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn constant(v: f64) -> Self;
    /// Value part.
    fn re(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;
    fn powi(self, n: i32) -> Self;
}

impl Real for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
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
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Value plus `K` directional derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const K: usize> {
    pub re: f64,
    pub d: [f64; K],
}

impl<const K: usize> Dual<K> {
    pub fn seeded(v: f64, dir: usize) -> Self {
        let mut d = [0.0; K];
        d[dir] = 1.0;
        Self { re: v, d }
    }
}

impl<const K: usize> PartialEq for Dual<K> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<const K: usize> PartialOrd for Dual<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<const K: usize> Add for Dual<K> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for k in 0..K {
            self.d[k] += rhs.d[k];
        }
        self
    }
}

impl<const K: usize> Sub for Dual<K> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for k in 0..K {
            self.d[k] -= rhs.d[k];
        }
        self
    }
}

impl<const K: usize> Mul for Dual<K> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = self.d[k] * rhs.re + self.re * rhs.d[k];
        }
        Self {
            re: self.re * rhs.re,
            d,
        }
    }
}

impl<const K: usize> Div for Dual<K> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.re / rhs.re;
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = (self.d[k] - q * rhs.d[k]) / rhs.re;
        }
        Self { re: q, d }
    }
}

impl<const K: usize> Neg for Dual<K> {
    type Output = Self;
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for k in 0..K {
            self.d[k] = -self.d[k];
        }
        self
    }
}

impl<const K: usize> AddAssign for Dual<K> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const K: usize> SubAssign for Dual<K> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const K: usize> MulAssign for Dual<K> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const K: usize> Real for Dual<K> {
    fn constant(v: f64) -> Self {
        Self { re: v, d: [0.0; K] }
    }

    fn re(&self) -> f64 {
        self.re
    }

    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = c * self.d[k];
        }
        Self { re: s, d }
    }

    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = -s * self.d[k];
        }
        Self { re: c, d }
    }

    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        let inv = 0.5 / r;
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = inv * self.d[k];
        }
        Self { re: r, d }
    }

    fn exp(self) -> Self {
        let e = self.re.exp();
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = e * self.d[k];
        }
        Self { re: e, d }
    }

    fn ln(self) -> Self {
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = self.d[k] / self.re;
        }
        Self {
            re: self.re.ln(),
            d,
        }
    }

    fn abs(self) -> Self {
        if self.re < 0.0 {
            -self
        } else {
            self
        }
    }

    fn max(self, other: Self) -> Self {
        if self.re >= other.re {
            self
        } else {
            other
        }
    }

    fn powi(self, n: i32) -> Self {
        let v = self.re.powi(n);
        let dv = f64::from(n) * self.re.powi(n - 1);
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = dv * self.d[k];
        }
        Self { re: v, d }
    }
}

/// Dense Jacobian of `f : ℝ^{n_in} → ℝ^{n_out}` at `x` by chunked forward
/// passes; writes the value into `value_out` and `∂f_i/∂x_j` into
/// `jac_out[i * n_in + j]`.
pub fn dense_jacobian<const K: usize>(
    n_in: usize,
    n_out: usize,
    mut f: impl FnMut(&[Dual<K>], &mut [Dual<K>]),
    x: &[f64],
    value_out: &mut [f64],
    jac_out: &mut [f64],
) {
    assert_eq!(x.len(), n_in);
    assert_eq!(value_out.len(), n_out);
    assert_eq!(jac_out.len(), n_in * n_out);
    let mut input: Vec<Dual<K>> = x.iter().map(|&v| Dual::constant(v)).collect();
    let mut output: Vec<Dual<K>> = vec![Dual::constant(0.0); n_out];
    let mut start = 0;
    while start < n_in {
        let width = K.min(n_in - start);
        for (k, inp) in input.iter_mut().enumerate() {
            inp.d = [0.0; K];
            if k >= start && k < start + width {
                inp.d[k - start] = 1.0;
            }
        }
        f(&input, &mut output);
        for (i, out) in output.iter().enumerate() {
            for k in 0..width {
                jac_out[i * n_in + start + k] = out.d[k];
            }
        }
        if start == 0 {
            for (i, out) in output.iter().enumerate() {
                value_out[i] = out.re;
            }
        }
        start += width;
    }
}
