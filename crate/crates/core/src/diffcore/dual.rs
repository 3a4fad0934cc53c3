//! Second-order forward mode in a single scalar direction.
//!
//! A [`Dual2`] carries a value together with its first and second derivative
//! with respect to one scalar parameter (time, for paths and correctors).
//! Arithmetic propagates both derivatives exactly by the chain and Leibniz
//! rules, so `t ↦ f(t)` evaluated on `Dual2::variable(t)` yields
//! `(f(t), f'(t), f''(t))` to rounding.

use std::cell::Cell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use super::{DiffError, Scalar};

thread_local! {
    static DOMAIN_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

fn flag_domain(op: &'static str) {
    DOMAIN_FAULT.with(|f| {
        if f.get().is_none() {
            f.set(Some(op));
        }
    });
}

fn take_domain_fault() -> Option<&'static str> {
    DOMAIN_FAULT.with(|f| f.take())
}

#[derive(Clone, Copy, PartialEq, Default)]
pub struct Dual2 {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl fmt::Debug for Dual2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual2({}, {}, {})", self.value, self.d1, self.d2)
    }
}

impl Dual2 {
    pub const fn new(value: f64, d1: f64, d2: f64) -> Self {
        Self { value, d1, d2 }
    }

    pub const fn constant(value: f64) -> Self {
        Self::new(value, 0.0, 0.0)
    }

    /// The independent variable: derivative one, curvature zero.
    pub const fn variable(value: f64) -> Self {
        Self::new(value, 1.0, 0.0)
    }

    /// Applies a unary function given its value and first two derivatives at `self.value`.
    #[inline]
    fn lift(self, f: f64, df: f64, ddf: f64) -> Self {
        Self {
            value: f,
            d1: df * self.d1,
            d2: ddf * self.d1 * self.d1 + df * self.d2,
        }
    }

    pub fn recip(self) -> Self {
        if self.value == 0.0 {
            flag_domain("div");
        }
        let r = 1.0 / self.value;
        self.lift(r, -r * r, 2.0 * r * r * r)
    }

    pub fn powi(self, n: i32) -> Self {
        let x = self.value;
        let f = x.powi(n);
        let df = if n == 0 { 0.0 } else { n as f64 * x.powi(n - 1) };
        let ddf = if n == 0 || n == 1 {
            0.0
        } else {
            (n * (n - 1)) as f64 * x.powi(n - 2)
        };
        self.lift(f, df, ddf)
    }
}

impl Add for Dual2 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)
    }
}

impl Sub for Dual2 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.value - o.value, self.d1 - o.d1, self.d2 - o.d2)
    }
}

impl Mul for Dual2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.value * o.value,
            self.d1 * o.value + self.value * o.d1,
            self.d2 * o.value + 2.0 * self.d1 * o.d1 + self.value * o.d2,
        )
    }
}

impl Div for Dual2 {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}

impl Neg for Dual2 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.value, -self.d1, -self.d2)
    }
}

impl Add<f64> for Dual2 {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Self::new(self.value + o, self.d1, self.d2)
    }
}

impl Mul<f64> for Dual2 {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        Self::new(self.value * o, self.d1 * o, self.d2 * o)
    }
}

impl AddAssign for Dual2 {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Dual2 {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl MulAssign for Dual2 {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl Scalar for Dual2 {
    fn mul_f64(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }

    #[inline]
    fn value(self) -> f64 {
        self.value
    }

    fn exp(self) -> Self {
        let e = self.value.exp();
        self.lift(e, e, e)
    }

    fn ln(self) -> Self {
        if self.value <= 0.0 {
            flag_domain("ln");
        }
        let r = 1.0 / self.value;
        self.lift(self.value.ln(), r, -r * r)
    }

    fn sqrt(self) -> Self {
        if self.value <= 0.0 {
            flag_domain("sqrt");
        }
        let s = self.value.sqrt();
        self.lift(s, 0.5 / s, -0.25 / (s * s * s))
    }

    fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.lift(s, c, -s)
    }

    fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.lift(c, -s, -c)
    }

    fn tanh(self) -> Self {
        let th = self.value.tanh();
        let sech2 = 1.0 - th * th;
        self.lift(th, sech2, -2.0 * th * sech2)
    }

    fn sigmoid(self) -> Self {
        let s = super::sigmoid(self.value);
        let ds = s * (1.0 - s);
        self.lift(s, ds, ds * (1.0 - 2.0 * s))
    }

    fn softplus(self) -> Self {
        let s = super::sigmoid(self.value);
        self.lift(super::softplus(self.value), s, s * (1.0 - s))
    }

    fn silu(self) -> Self {
        let x = self.value;
        let s = super::sigmoid(x);
        let ds = s * (1.0 - s);
        // d/dx x·σ(x) = σ + xσ',  d²/dx² = 2σ' + xσ'(1−2σ)
        self.lift(x * s, s + x * ds, 2.0 * ds + x * ds * (1.0 - 2.0 * s))
    }
}

/// Value, first and second derivative of a vector-valued function of one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl Jet {
    pub fn from_duals(duals: &[Dual2]) -> Self {
        Self {
            value: duals.iter().map(|d| d.value).collect(),
            d1: duals.iter().map(|d| d.d1).collect(),
            d2: duals.iter().map(|d| d.d2).collect(),
        }
    }
}

/// Evaluates `f` at `t` in second-order dual arithmetic.
///
/// Fails with [`DiffError::Domain`] if `f` passed through a primitive outside
/// its differentiable domain (`sqrt` or `ln` at a non-positive argument,
/// division by zero), and with [`DiffError::NonFinite`] if any output is not
/// finite.
pub fn forward_dual<F>(f: F, t: f64) -> Result<Jet, DiffError>
where
    F: FnOnce(Dual2) -> Vec<Dual2>,
{
    take_domain_fault();
    let out = f(Dual2::variable(t));
    if let Some(op) = take_domain_fault() {
        return Err(DiffError::Domain { op });
    }
    if let Some(i) = out
        .iter()
        .position(|d| !(d.value.is_finite() && d.d1.is_finite() && d.d2.is_finite()))
    {
        return Err(DiffError::NonFinite {
            node: i,
            op: "forward_dual output",
        });
    }
    Ok(Jet::from_duals(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let jet = forward_dual(|t| vec![t * t], 3.0).unwrap();
        assert_eq!(jet.value, vec![9.0]);
        assert_eq!(jet.d1, vec![6.0]);
        assert_eq!(jet.d2, vec![2.0]);
    }

    #[test]
    fn linear_interpolant_has_constant_velocity() {
        let x0 = [1.0, -2.0, 0.5];
        let x1 = [3.0, 4.0, -1.5];
        for &t in &[0.0, 0.3, 0.77, 1.0] {
            let jet = forward_dual(
                |t| {
                    x0.iter()
                        .zip(&x1)
                        .map(|(&a, &b)| (Dual2::constant(1.0) - t) * a + t * b)
                        .collect()
                },
                t,
            )
            .unwrap();
            for k in 0..3 {
                let lerp = (1.0 - t) * x0[k] + t * x1[k];
                assert!((jet.value[k] - lerp).abs() < 1e-15);
                assert!((jet.d1[k] - (x1[k] - x0[k])).abs() < 1e-15);
                assert_eq!(jet.d2[k], 0.0);
            }
        }
    }

    #[test]
    fn sine_second_derivative() {
        for &t in &[-2.0, -0.3, 0.0, 0.9, 4.1] {
            let jet = forward_dual(|t| vec![t.sin()], t).unwrap();
            assert!((jet.d2[0] + t.sin()).abs() < 1e-12);
            assert!((jet.d1[0] - t.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_carry_no_derivative() {
        let c = Dual2::constant(2.5);
        let y = c.tanh().exp() * c;
        assert_eq!((y.d1, y.d2), (0.0, 0.0));
    }

    #[test]
    fn product_rule() {
        let f = Dual2::new(2.0, 0.5, -1.0);
        let g = Dual2::new(-3.0, 4.0, 0.25);
        let p = f * g;
        assert_eq!(p.d1, f.d1 * g.value + f.value * g.d1);
        assert_eq!(p.d2, f.d2 * g.value + 2.0 * f.d1 * g.d1 + f.value * g.d2);
    }

    #[test]
    fn sqrt_at_zero_is_a_domain_error() {
        let err = forward_dual(|t| vec![(t - Dual2::constant(1.0)).sqrt()], 1.0).unwrap_err();
        assert_eq!(err, DiffError::Domain { op: "sqrt" });
        // the fault does not leak into the next evaluation
        assert!(forward_dual(|t| vec![t.sqrt()], 4.0).is_ok());
    }

    #[test]
    fn log_of_negative_is_a_domain_error() {
        let err = forward_dual(|t| vec![t.ln()], -1.0).unwrap_err();
        assert_eq!(err, DiffError::Domain { op: "ln" });
    }

    #[test]
    fn activations_match_finite_differences() {
        let h = 1e-4;
        type Act = fn(Dual2) -> Dual2;
        let cases: [(Act, &str); 4] = [
            (|x| x.tanh(), "tanh"),
            (|x| x.silu(), "silu"),
            (|x| x.softplus(), "softplus"),
            (|x| x.sigmoid(), "sigmoid"),
        ];
        for (f, name) in cases {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
                let v = |s: f64| f(Dual2::constant(s)).value;
                let jet = f(Dual2::variable(x));
                let fd1 = (v(x + h) - v(x - h)) / (2.0 * h);
                let fd2 = (v(x + h) - 2.0 * v(x) + v(x - h)) / (h * h);
                assert!((jet.d1 - fd1).abs() < 1e-7, "{name} d1 at {x}");
                assert!((jet.d2 - fd2).abs() < 1e-5, "{name} d2 at {x}");
            }
        }
    }
}
