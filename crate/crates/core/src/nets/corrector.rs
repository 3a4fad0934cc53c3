use std::path::Path;

use crate::diffcore::{forward_dual, Activation, DiffError, Dual2, Jet, Scalar, Tape, Var};
use crate::linalg;
use crate::persistence::Precision;

use super::{check_dim, load_checkpoint, save_checkpoint, Mlp, MlpSpec, NetError, NetHeader};

/// Correction `φ(x0, x1, t) = t(1 − t) · MLP(x0, x1, t)`, zero at both ends by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorNet {
    dim: usize,
    mlp: Mlp,
}

fn envelope<S: Scalar>(t: S) -> S {
    t * (S::from_f64(1.0) - t)
}

impl CorrectorNet {
    pub fn new(dim: usize, hidden: Vec<usize>, activation: Activation, seed: u64) -> Result<Self, NetError> {
        let spec = MlpSpec {
            input_dim: 2 * dim + 1,
            hidden,
            output_dim: dim,
            activation,
            seed,
        };
        Ok(Self { dim, mlp: Mlp::new(spec)? })
    }

    pub fn from_parts(dim: usize, spec: MlpSpec, params: Vec<f64>) -> Result<Self, NetError> {
        if spec.input_dim != 2 * dim + 1 || spec.output_dim != dim {
            return Err(NetError::Spec(format!(
                "corrector over R^{dim} needs input {} and output {dim}, spec has {} and {}",
                2 * dim + 1,
                spec.input_dim,
                spec.output_dim
            )));
        }
        Ok(Self {
            dim,
            mlp: Mlp::from_params(spec, params)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    fn check(&self, x0: &[f64], x1: &[f64]) -> Result<(), NetError> {
        check_dim("corrector x0", self.dim, x0)?;
        check_dim("corrector x1", self.dim, x1)
    }

    fn input<S: Scalar>(x0: &[f64], x1: &[f64], t: S) -> Vec<S> {
        x0.iter()
            .chain(x1)
            .map(|v| S::from_f64(*v))
            .chain(std::iter::once(t))
            .collect()
    }

    fn correction<S: Scalar>(&self, x0: &[f64], x1: &[f64], t: S) -> Vec<S> {
        let e = envelope(t);
        self.mlp
            .forward(&Self::input(x0, x1, t))
            .into_iter()
            .map(|v| v * e)
            .collect()
    }

    /// The network before the envelope is applied.
    pub fn raw(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>, NetError> {
        self.check(x0, x1)?;
        Ok(self.mlp.forward(&Self::input(x0, x1, t)))
    }

    pub fn eval(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>, NetError> {
        self.check(x0, x1)?;
        Ok(self.correction(x0, x1, t))
    }

    /// `φ`, `∂ₜφ`, `∂ₜ²φ` by second-order forward mode.
    pub fn jet(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Jet, NetError> {
        self.check(x0, x1)?;
        Ok(forward_dual(|t: Dual2| self.correction(x0, x1, t), t)?)
    }

    pub fn time_derivative(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>, NetError> {
        Ok(self.jet(x0, x1, t)?.d1)
    }

    /// `(1 − t)x0 + t x1 + φ`.
    pub fn interpolant(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>, NetError> {
        let phi = self.eval(x0, x1, t)?;
        Ok(linalg::add(&linalg::lerp(x0, x1, t), &phi))
    }

    /// Position, velocity and acceleration of the interpolant at `t`.
    pub fn interpolant_jet(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Jet, NetError> {
        let j = self.jet(x0, x1, t)?;
        let delta = linalg::sub(x1, x0);
        Ok(Jet {
            value: linalg::add(&linalg::lerp(x0, x1, t), &j.value),
            d1: linalg::add(&delta, &j.d1),
            d2: j.d2,
        })
    }

    /// `φ(x0, x1, t)` recorded on a tape over [`CorrectorNet::params`].
    pub fn tape_eval(&self, tape: &mut Tape<'_>, x0: &[f64], x1: &[f64], t: f64) -> Result<Var, DiffError> {
        let input = tape.input(&Self::input(x0, x1, t))?;
        let raw = self.mlp.forward_tape(tape, input)?;
        tape.scale(raw, envelope(t))
    }

    pub fn header(&self) -> NetHeader {
        NetHeader::Corrector {
            dim: self.dim,
            spec: self.mlp.spec().clone(),
        }
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<(), NetError> {
        save_checkpoint(path, &self.header(), self.params(), precision)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        match load_checkpoint(path)? {
            (NetHeader::Corrector { dim, spec }, _, params) => Self::from_parts(dim, spec, params),
            (other, _, _) => Err(NetError::WrongKind {
                expected: "corrector",
                found: other.kind(),
            }),
        }
    }
}

/// Cumulative arc length of an interpolant sampled on a uniform `t` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcTable {
    cum: Vec<f64>,
}

impl ArcTable {
    /// Trapezoidal arc length of `net`'s interpolant at `t = i/samples`.
    pub fn new(net: &CorrectorNet, x0: &[f64], x1: &[f64], samples: usize) -> Result<Self, NetError> {
        let samples = samples.max(1);
        let mut speeds = Vec::with_capacity(samples + 1);
        for i in 0..=samples {
            speeds.push(linalg::norm(&net.interpolant_jet(x0, x1, i as f64 / samples as f64)?.d1));
        }
        Ok(Self::from_speeds(&speeds))
    }

    /// Table from speeds at equally spaced parameters on `[0, 1]`.
    pub fn from_speeds(speeds: &[f64]) -> Self {
        let n = speeds.len().saturating_sub(1).max(1) as f64;
        let mut cum = vec![0.0; speeds.len().max(2)];
        for i in 1..speeds.len() {
            cum[i] = cum[i - 1] + 0.5 * (speeds[i - 1] + speeds[i]) / n;
        }
        Self { cum }
    }

    pub fn length(&self) -> f64 {
        self.cum[self.cum.len() - 1]
    }

    /// Parameter at which the arc length reaches the fraction `s` of the total,
    /// by linear interpolation inside the table cell.
    pub fn param_at(&self, s: f64) -> f64 {
        let target = s * self.length();
        let cum = &self.cum;
        let k = cum.partition_point(|c| *c < target).clamp(1, cum.len() - 1);
        let (a, b) = (cum[k - 1], cum[k]);
        let frac = if b > a { ((target - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 };
        (k as f64 - 1.0 + frac) / (cum.len() - 1) as f64
    }
}
