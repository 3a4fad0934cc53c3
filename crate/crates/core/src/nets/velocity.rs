use std::path::Path;

use crate::diffcore::{Activation, DiffError, Tape, Var};
use crate::persistence::Precision;

use super::{check_dim, load_checkpoint, save_checkpoint, Mlp, MlpSpec, NetError, NetHeader};

/// Velocity field `v(x, t, c)` over concatenated inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    dim: usize,
    cond_dim: usize,
    mlp: Mlp,
}

impl VelocityNet {
    pub fn new(dim: usize, cond_dim: usize, hidden: Vec<usize>, activation: Activation, seed: u64) -> Result<Self, NetError> {
        let spec = MlpSpec {
            input_dim: dim + 1 + cond_dim,
            hidden,
            output_dim: dim,
            activation,
            seed,
        };
        Ok(Self {
            dim,
            cond_dim,
            mlp: Mlp::new(spec)?,
        })
    }

    pub fn from_parts(dim: usize, cond_dim: usize, spec: MlpSpec, params: Vec<f64>) -> Result<Self, NetError> {
        if spec.input_dim != dim + 1 + cond_dim || spec.output_dim != dim {
            return Err(NetError::Spec(format!(
                "velocity net over R^{dim} with {cond_dim} condition features needs input {} and output {dim}",
                dim + 1 + cond_dim
            )));
        }
        Ok(Self {
            dim,
            cond_dim,
            mlp: Mlp::from_params(spec, params)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
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

    fn input(x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + 1 + c.len());
        v.extend_from_slice(x);
        v.push(t);
        v.extend_from_slice(c);
        v
    }

    fn check(&self, x: &[f64], c: &[f64]) -> Result<(), NetError> {
        check_dim("velocity x", self.dim, x)?;
        check_dim("velocity condition", self.cond_dim, c)
    }

    pub fn eval(&self, x: &[f64], t: f64, c: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check(x, c)?;
        Ok(self.mlp.forward(&Self::input(x, t, c)))
    }

    /// `v(x, t, c)` recorded on a tape over [`VelocityNet::params`].
    pub fn tape_eval(&self, tape: &mut Tape<'_>, x: &[f64], t: f64, c: &[f64]) -> Result<Var, DiffError> {
        let input = tape.input(&Self::input(x, t, c))?;
        self.mlp.forward_tape(tape, input)
    }

    pub fn header(&self) -> NetHeader {
        NetHeader::Velocity {
            dim: self.dim,
            cond_dim: self.cond_dim,
            spec: self.mlp.spec().clone(),
        }
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<(), NetError> {
        save_checkpoint(path, &self.header(), self.params(), precision)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        match load_checkpoint(path)? {
            (NetHeader::Velocity { dim, cond_dim, spec }, _, params) => Self::from_parts(dim, cond_dim, spec, params),
            (other, _, _) => Err(NetError::WrongKind {
                expected: "velocity",
                found: other.kind(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_output() {
        let mut a = VelocityNet::new(2, 2, vec![8], Activation::Silu, 3).unwrap();
        a.mlp_mut().randomize(4, 0.5);
        let b = a.clone();
        let x = a.eval(&[0.1, 0.2], 0.3, &[1.0, 0.0]).unwrap();
        let y = b.eval(&[0.1, 0.2], 0.3, &[1.0, 0.0]).unwrap();
        assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn affine_net_selects_condition_channel() {
        // inputs (x0, x1, t, c0, c1); W picks c so v ≡ c, a constant field for a fixed condition
        let spec = MlpSpec {
            input_dim: 5,
            hidden: vec![],
            output_dim: 2,
            activation: Activation::Identity,
            seed: 0,
        };
        let w = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let params = [w, vec![0.0, 0.0]].concat();
        let v = VelocityNet::from_parts(2, 2, spec, params).unwrap();
        let b = [0.7, -1.25];
        for (x, t) in [([0.0, 0.0], 0.0), ([3.0, -2.0], 0.5), ([-1.0, 9.0], 1.0)] {
            assert_eq!(v.eval(&x, t, &b).unwrap(), b.to_vec());
        }
    }

    #[test]
    fn wrong_condition_width_rejected() {
        let v = VelocityNet::new(2, 3, vec![4], Activation::Tanh, 1).unwrap();
        assert!(matches!(v.eval(&[0.0, 0.0], 0.5, &[1.0]), Err(NetError::Dimension { .. })));
    }
}
