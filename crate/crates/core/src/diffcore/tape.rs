//! Reverse-mode gradients over a closed set of vector primitives.
//!
//! A [`Tape`] borrows a flat parameter vector and records every primitive in
//! evaluation order. [`Tape::backward`] replays the record in reverse and
//! accumulates the gradient of a scalar node with respect to that parameter
//! vector. Leaves created by [`Tape::input`] or [`Tape::stop`] are constants:
//! nothing flows through them.

use super::{sigmoid, softplus, Activation, DiffError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { offset: usize },
    Affine { w: usize, b: usize, x: Var },
    Act { act: Activation, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Div(Var, Var),
    Dot(Var, Var),
    SumSquares(Var),
    Norm(Var),
    Concat(Vec<Var>),
    Sum(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Act { .. } => "activation",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Div(..) => "div",
            Op::Dot(..) => "dot",
            Op::SumSquares(..) => "sum_squares",
            Op::Norm(..) => "norm",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Single-use record of a computation over `params`.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Result<Var, DiffError> {
        let node = self.nodes.len();
        if value.iter().any(|x| !x.is_finite()) {
            return Err(DiffError::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(node))
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize, DiffError> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(DiffError::Shape {
                op,
                expected: la,
                found: lb,
            });
        }
        Ok(la)
    }

    fn require_scalar(&self, op: &'static str, s: Var) -> Result<f64, DiffError> {
        match self.value(s) {
            [x] => Ok(*x),
            other => Err(DiffError::Shape {
                op,
                expected: 1,
                found: other.len(),
            }),
        }
    }

    /// A constant leaf.
    pub fn input(&mut self, value: &[f64]) -> Result<Var, DiffError> {
        self.push(value.to_vec(), Op::Input)
    }

    /// Stop-gradient: a constant leaf holding the current value of `v`.
    pub fn stop(&mut self, v: Var) -> Result<Var, DiffError> {
        let value = self.value(v).to_vec();
        self.push(value, Op::Input)
    }

    /// A view of `params[offset..offset + len]` as a differentiable node.
    pub fn param(&mut self, offset: usize, len: usize) -> Result<Var, DiffError> {
        if offset + len > self.params.len() {
            return Err(DiffError::Shape {
                op: "param",
                expected: self.params.len(),
                found: offset + len,
            });
        }
        let value = self.params[offset..offset + len].to_vec();
        self.push(value, Op::Param { offset })
    }

    /// `W x + b` with `W` (row-major, `rows × len(x)`) at `params[w..]` and `b` at `params[b..]`.
    pub fn affine(&mut self, w: usize, b: usize, rows: usize, x: Var) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let cols = xv.len();
        let need = (w + rows * cols).max(b + rows);
        if need > self.params.len() {
            return Err(DiffError::Shape {
                op: "affine",
                expected: self.params.len(),
                found: need,
            });
        }
        let weights = &self.params[w..w + rows * cols];
        let bias = &self.params[b..b + rows];
        let value: Vec<f64> = weights
            .chunks_exact(cols)
            .zip(bias)
            .map(|(row, bi)| bi + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        self.push(value, Op::Affine { w, b, x })
    }

    pub fn activate(&mut self, act: Activation, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).iter().map(|&v| act.apply(v)).collect();
        self.push(value, Op::Act { act, x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_len("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_len("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_len("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        let value = self.value(a).iter().map(|x| x * k).collect();
        self.push(value, Op::Scale(a, k))
    }

    /// `a · s` for a scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let k = self.require_scalar("scale_by", s)?;
        let value = self.value(a).iter().map(|x| x * k).collect();
        self.push(value, Op::ScaleBy(a, s))
    }

    /// `a / s` for a scalar node `s`.
    pub fn div(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let k = self.require_scalar("div", s)?;
        if k == 0.0 {
            return Err(DiffError::Domain { op: "div" });
        }
        let value = self.value(a).iter().map(|x| x / k).collect();
        self.push(value, Op::Div(a, s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_len("dot", a, b)?;
        let d = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(vec![d], Op::Dot(a, b))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).iter().map(|x| x * x).sum();
        self.push(vec![s], Op::SumSquares(a))
    }

    pub fn norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        self.push(vec![s.sqrt()], Op::Norm(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let value = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    /// Elementwise sum of equal-length nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::Shape {
            op: "sum",
            expected: 1,
            found: 0,
        })?;
        let mut value = self.value(first).to_vec();
        for p in &parts[1..] {
            self.same_len("sum", first, *p)?;
            for (acc, x) in value.iter_mut().zip(self.value(*p)) {
                *acc += x;
            }
        }
        self.push(value, Op::Sum(parts.to_vec()))
    }

    /// Gradient of the scalar node `loss` with respect to the tape's parameters.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::Shape {
                op: "backward",
                expected: 1,
                found: self.value(loss).len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (dst, gi) in grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::Affine { w, b, x } => {
                    let xv = self.value(*x);
                    let cols = xv.len();
                    let rows = g.len();
                    let weights = &self.params[*w..*w + rows * cols];
                    let gx = acc(&mut adj, *x, cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &weights[r * cols..(r + 1) * cols];
                        let grow = &mut grad[*w + r * cols..*w + (r + 1) * cols];
                        for c in 0..cols {
                            grow[c] += gr * xv[c];
                            gx[c] += gr * row[c];
                        }
                    }
                    for (dst, gr) in grad[*b..*b + rows].iter_mut().zip(&g) {
                        *dst += gr;
                    }
                }
                Op::Act { act, x } => {
                    let xv = self.value(*x);
                    let gx = acc(&mut adj, *x, xv.len());
                    for ((dst, &xi), gi) in gx.iter_mut().zip(xv).zip(&g) {
                        *dst += gi * act.derivative(xi);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut adj, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut adj, *a, g.len());
                    for ((dst, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                        *dst += gi * bi;
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for ((dst, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                        *dst += gi * ai;
                    }
                }
                Op::Scale(a, k) => add_into(acc(&mut adj, *a, g.len()), &g, *k),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let av = self.value(*a);
                    let gs: f64 = g.iter().zip(av).map(|(gi, ai)| gi * ai).sum();
                    add_into(acc(&mut adj, *a, g.len()), &g, k);
                    acc(&mut adj, *s, 1)[0] += gs;
                }
                Op::Div(a, s) => {
                    let k = self.scalar(*s);
                    let av = self.value(*a);
                    let gs: f64 = g.iter().zip(av).map(|(gi, ai)| gi * ai).sum::<f64>() / (k * k);
                    add_into(acc(&mut adj, *a, g.len()), &g, 1.0 / k);
                    acc(&mut adj, *s, 1)[0] -= gs;
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    add_into(acc(&mut adj, *a, bv.len()), bv, g[0]);
                    add_into(acc(&mut adj, *b, av.len()), av, g[0]);
                }
                Op::SumSquares(a) => {
                    let av = self.value(*a);
                    add_into(acc(&mut adj, *a, av.len()), av, 2.0 * g[0]);
                }
                Op::Norm(a) => {
                    let n = node.value[0];
                    if n == 0.0 {
                        return Err(DiffError::Domain { op: "norm" });
                    }
                    let av = self.value(*a);
                    add_into(acc(&mut adj, *a, av.len()), av, g[0] / n);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        add_into(acc(&mut adj, *p, len), &g[start..start + len], 1.0);
                        start += len;
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        add_into(acc(&mut adj, *p, g.len()), &g, 1.0);
                    }
                }
            }
        }
        Ok(grad)
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Evaluates `build` on a fresh tape over `params` and returns the loss value and its gradient.
pub fn reverse_grad<F>(params: &[f64], build: F) -> Result<(f64, Vec<f64>), DiffError>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new(params);
    let loss = build(&mut tape)?;
    let grad = tape.backward(loss)?;
    Ok((tape.scalar(loss), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = [0.3, -1.2, 4.0, 0.0];
        let (loss, g) = reverse_grad(&p, |t| {
            let v = t.param(0, 4)?;
            let s = t.sum_squares(v)?;
            t.scale(s, 0.5)
        })
        .unwrap();
        assert!((loss - 0.5 * (0.09 + 1.44 + 16.0)).abs() < 1e-15);
        assert_eq!(g, p.to_vec());
    }

    #[test]
    fn stopped_factor_acts_as_constant() {
        let p = [1.5, -0.5, 2.0];
        let (_, g) = reverse_grad(&p, |t| {
            let z = t.param(0, 3)?;
            // c depends on z but is stop-gradded
            let sq = t.mul(z, z)?;
            let c = t.stop(sq)?;
            t.dot(c, z)
        })
        .unwrap();
        let expect: Vec<f64> = p.iter().map(|x| x * x).collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = [0.0; 5];
        let err = reverse_grad(&p, |t| {
            let a = t.param(0, 2)?;
            let b = t.param(2, 3)?;
            t.dot(a, b)
        })
        .unwrap_err();
        assert!(matches!(err, DiffError::Shape { op: "dot", .. }));
    }

    #[test]
    fn non_finite_forward_names_the_node() {
        let p = [1.0];
        let err = reverse_grad(&p, |t| {
            let a = t.param(0, 1)?;
            let big = t.scale(a, f64::MAX)?;
            let inf = t.scale(big, 10.0)?;
            t.sum_squares(inf)
        })
        .unwrap_err();
        assert_eq!(err, DiffError::NonFinite { node: 2, op: "scale" });
    }

    #[test]
    fn affine_gradient_by_hand() {
        // W = [[1,2],[3,4]], b = [0.5,-0.5], x = [1,-1] constant; loss = sum(Wx+b)
        let p = [1.0, 2.0, 3.0, 4.0, 0.5, -0.5];
        let (loss, g) = reverse_grad(&p, |t| {
            let x = t.input(&[1.0, -1.0])?;
            let y = t.affine(0, 4, 2, x)?;
            let ones = t.input(&[1.0, 1.0])?;
            t.dot(y, ones)
        })
        .unwrap();
        assert_eq!(loss, (1.0 - 2.0 + 0.5) + (3.0 - 4.0 - 0.5));
        assert_eq!(g, vec![1.0, -1.0, 1.0, -1.0, 1.0, 1.0]);
    }
}
