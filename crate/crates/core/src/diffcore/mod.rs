//! Minimal differentiation engine.
//!
//! Two independent routes share one primitive set:
//! [`dual`] propagates first and second derivatives along a single scalar
//! parameter, [`tape`] records vector primitives and back-propagates to a flat
//! parameter vector. Network code is written once over [`Scalar`] and runs on
//! `f64` and [`Dual2`]; training losses are rebuilt on a [`Tape`].

pub mod dual;
pub mod tape;

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dual::{forward_dual, Dual2, Jet};
pub use tape::{reverse_grad, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiffError {
    #[error("{op}: expected length {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("{op} evaluated outside its differentiable domain")]
    Domain { op: &'static str },
}

/// Elementwise nonlinearity of a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
    Softplus,
    Identity,
}

/// Numbers the shared network code can run on.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn silu(self) -> Self;

    /// `self · k` for a plain constant.
    fn mul_f64(self, k: f64) -> Self {
        self * Self::from_f64(k)
    }

    fn activate(self, act: Activation) -> Self {
        match act {
            Activation::Tanh => self.tanh(),
            Activation::Silu => self.silu(),
            Activation::Softplus => self.softplus(),
            Activation::Identity => self,
        }
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
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
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn silu(self) -> Self {
        self * sigmoid(self)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    /// Directional derivative along e_i from forward mode, for a function written over Scalar.
    fn forward_partial<F>(p: &[f64], i: usize, f: F) -> f64
    where
        F: Fn(&[Dual2]) -> Dual2,
    {
        let duals: Vec<Dual2> = p
            .iter()
            .enumerate()
            .map(|(k, &v)| if k == i { Dual2::variable(v) } else { Dual2::constant(v) })
            .collect();
        f(&duals).d1
    }

    fn check_primitive<F, B>(name: &str, n: usize, f: F, build: B)
    where
        F: Fn(&[Dual2]) -> Dual2,
        B: Fn(&mut Tape<'_>) -> Result<Var, DiffError>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (_, grad) = reverse_grad(&p, &build).unwrap();
            for i in 0..n {
                let fwd = forward_partial(&p, i, &f);
                assert!(
                    rel_close(fwd, grad[i], 1e-10) || (fwd - grad[i]).abs() < 1e-14,
                    "{name}: component {i}: forward {fwd} vs reverse {}",
                    grad[i]
                );
            }
        }
    }

    fn dsum(xs: impl Iterator<Item = Dual2>) -> Dual2 {
        xs.fold(Dual2::constant(0.0), |a, b| a + b)
    }

    #[test]
    fn forward_and_reverse_agree_per_primitive() {
        // affine: loss = Σ_r (W x + b)_r · r  with x constant
        let x = [0.7, -0.4, 1.1];
        check_primitive(
            "affine",
            8,
            |p| {
                dsum((0..2).map(|r| {
                    let row = dsum((0..3).map(|c| p[r * 3 + c] * x[c]));
                    (row + p[6 + r]) * (r as f64 + 1.0)
                }))
            },
            |t| {
                let xi = t.input(&x)?;
                let y = t.affine(0, 6, 2, xi)?;
                let w = t.input(&[1.0, 2.0])?;
                t.dot(y, w)
            },
        );
        for act in [Activation::Tanh, Activation::Silu, Activation::Softplus, Activation::Identity] {
            check_primitive(
                "activation",
                3,
                |p| dsum(p.iter().map(|v| v.activate(act))),
                |t| {
                    let v = t.param(0, 3)?;
                    let a = t.activate(act, v)?;
                    let ones = t.input(&[1.0; 3])?;
                    t.dot(a, ones)
                },
            );
        }
        check_primitive(
            "mul/sub/add",
            4,
            |p| (p[0] * p[1] - p[2]) * (p[3] + p[0]),
            |t| {
                let a = t.param(0, 1)?;
                let b = t.param(1, 1)?;
                let c = t.param(2, 1)?;
                let d = t.param(3, 1)?;
                let ab = t.mul(a, b)?;
                let l = t.sub(ab, c)?;
                let r = t.add(d, a)?;
                t.mul(l, r)
            },
        );
        check_primitive(
            "norm/div/scale_by",
            4,
            |p| {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                (p[0] * p[3]) / n * 2.5
            },
            |t| {
                let v = t.param(0, 3)?;
                let s = t.param(3, 1)?;
                let n = t.norm(v)?;
                let first = t.param(0, 1)?;
                let prod = t.scale_by(first, s)?;
                let q = t.div(prod, n)?;
                t.scale(q, 2.5)
            },
        );
        check_primitive(
            "concat/sum/sum_squares",
            4,
            |p| {
                let a = p[0] + p[2];
                let b = p[1] + p[3];
                a * a + b * b + p[0] * p[0]
            },
            |t| {
                let lo = t.param(0, 2)?;
                let hi = t.param(2, 2)?;
                let s = t.sum(&[lo, hi])?;
                let first = t.param(0, 1)?;
                let c = t.concat(&[s, first])?;
                t.sum_squares(c)
            },
        );
    }

    #[test]
    fn stop_grad_equals_frozen_constant() {
        // reverse_grad of stop(g)·z equals reverse_grad of c·z with c := value of g
        let p = [0.2, -0.9, 1.3];
        let (_, with_stop) = reverse_grad(&p, |t| {
            let z = t.param(0, 3)?;
            let g = t.activate(Activation::Tanh, z)?;
            let g = t.scale(g, 3.0)?;
            let g = t.stop(g)?;
            t.dot(g, z)
        })
        .unwrap();
        let c: Vec<f64> = p.iter().map(|v| 3.0 * v.tanh()).collect();
        let (_, with_const) = reverse_grad(&p, |t| {
            let z = t.param(0, 3)?;
            let cv = t.input(&c)?;
            t.dot(cv, z)
        })
        .unwrap();
        assert_eq!(with_stop, with_const);
        assert_eq!(with_const, c);
    }

    #[test]
    fn softplus_is_stable_for_large_arguments() {
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
