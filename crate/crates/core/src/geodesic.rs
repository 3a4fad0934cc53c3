//! Discretised probability-density geodesics.
//!
//! A path is a polyline of `N + 1` nodes at uniform times `tᵢ = i/N` with
//! pinned endpoints. Its action is the density-weighted length
//! `∫ ‖γ̇‖ / p(γ) dt`; node velocities and accelerations come from
//! second-order finite-difference stencils. [`optimize_path`] descends the
//! action along the functional derivative, and [`grid_geodesic_oracle`]
//! provides an independent Dijkstra estimate in two dimensions.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::DensityField;
use crate::linalg;
use crate::par;

/// Speeds below this are treated as a stalled path.
const MIN_SPEED: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeodesicError {
    #[error("a path needs at least 5 nodes (N >= 4), got {0}")]
    TooFewNodes(usize),
    #[error("node {node} has dimension {found}, expected {expected}")]
    Dimension {
        node: usize,
        expected: usize,
        found: usize,
    },
    #[error("node {0} is not finite")]
    NonFiniteNode(usize),
    #[error("vanishing speed at interior node {node}")]
    DegenerateSpeed { node: usize },
    #[error("action increased for {consecutive} consecutive iterations")]
    Diverged { consecutive: usize, history: Vec<f64> },
    #[error("non-finite action at iteration {iteration}")]
    NonFinite { iteration: usize, history: Vec<f64> },
    #[error("endpoint {0:?} lies outside the oracle bounds")]
    OutsideBounds(Vec<f64>),
    #[error("grid oracle works in two dimensions, got {0}")]
    NotPlanar(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// `N + 1` nodes at `tᵢ = i/N`; the first and last node are fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    nodes: Vec<Vec<f64>>,
}

impl DiscretePath {
    pub fn new(nodes: Vec<Vec<f64>>) -> Result<Self, GeodesicError> {
        if nodes.len() < 5 {
            return Err(GeodesicError::TooFewNodes(nodes.len()));
        }
        let dim = nodes[0].len();
        for (i, n) in nodes.iter().enumerate() {
            if n.len() != dim {
                return Err(GeodesicError::Dimension {
                    node: i,
                    expected: dim,
                    found: n.len(),
                });
            }
            if !linalg::is_finite(n) {
                return Err(GeodesicError::NonFiniteNode(i));
            }
        }
        Ok(Self { nodes })
    }

    /// Straight line with `segments` equal steps.
    pub fn linear(x0: &[f64], x1: &[f64], segments: usize) -> Result<Self, GeodesicError> {
        let nodes = (0..=segments)
            .map(|i| linalg::lerp(x0, x1, i as f64 / segments as f64))
            .collect();
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    /// `N`, the number of segments.
    pub fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn start(&self) -> &[f64] {
        &self.nodes[0]
    }

    pub fn end(&self) -> &[f64] {
        &self.nodes[self.segments()]
    }

    /// Euclidean length of the polyline.
    pub fn polyline_length(&self) -> f64 {
        self.nodes.windows(2).map(|w| linalg::dist(&w[0], &w[1])).sum()
    }

    pub fn into_nodes(self) -> Vec<Vec<f64>> {
        self.nodes
    }
}

/// Per-node velocity and acceleration.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDerivatives {
    pub vel: Vec<Vec<f64>>,
    pub acc: Vec<Vec<f64>>,
}

/// Central differences inside, one-sided second-order stencils at the ends.
pub fn path_derivatives(path: &DiscretePath) -> PathDerivatives {
    let x = &path.nodes;
    let n = path.segments();
    let nf = n as f64;
    let d = path.dim();
    let mut vel = vec![vec![0.0; d]; n + 1];
    let mut acc = vec![vec![0.0; d]; n + 1];
    for k in 0..d {
        // stencils written as differences from the endpoint so constant paths give exact zeros
        let (a1, a2, a3) = (x[1][k] - x[0][k], x[2][k] - x[0][k], x[3][k] - x[0][k]);
        vel[0][k] = nf * (4.0 * a1 - a2) / 2.0;
        acc[0][k] = nf * nf * (-5.0 * a1 + 4.0 * a2 - a3);
        let (b1, b2, b3) = (x[n - 1][k] - x[n][k], x[n - 2][k] - x[n][k], x[n - 3][k] - x[n][k]);
        vel[n][k] = -nf * (4.0 * b1 - b2) / 2.0;
        acc[n][k] = nf * nf * (-5.0 * b1 + 4.0 * b2 - b3);
        for i in 1..n {
            vel[i][k] = (x[i + 1][k] - x[i - 1][k]) * nf / 2.0;
            acc[i][k] = (x[i + 1][k] - 2.0 * x[i][k] + x[i - 1][k]) * nf * nf;
        }
    }
    PathDerivatives { vel, acc }
}

/// Trapezoidal `∫ ‖γ̇‖ / p(γ) dt` over the nodes.
pub fn action<F: DensityField + ?Sized>(path: &DiscretePath, density: &F) -> f64 {
    let der = path_derivatives(path);
    let n = path.segments();
    let mut total = 0.0;
    for (i, (x, v)) in path.nodes.iter().zip(&der.vel).enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let speed = linalg::norm(v);
        if speed > 0.0 {
            total += w * speed * (-density.log_density(x)).exp();
        }
    }
    total / n as f64
}

/// Which multiple of the functional derivative drives the descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// `δS/δγ = −(‖γ̇‖/p)·[(I − γ̂γ̂ᵀ)∇log p + γ̈/‖γ̇‖²]`.
    #[default]
    FullFuncDeriv,
    /// `(p/‖γ̇‖)·δS/δγ = −[(I − γ̂γ̂ᵀ)∇log p + γ̈/‖γ̇‖²]`, the bracket alone.
    Rescaled,
    /// `FullFuncDeriv` with `γ̈` replaced by its normal part: exact for any parameterisation.
    Normal,
}

/// Functional derivative at one point of a constant-speed path.
///
/// Differentiating `∫ ‖γ̇‖/p dt` gives `−(1/(p‖γ̇‖))·(I − γ̂γ̂ᵀ)(‖γ̇‖²∇log p + γ̈)`;
/// pulling `‖γ̇‖²` out of the bracket leaves the prefactor `−‖γ̇‖/p`.
/// The tangential part of `γ̈` is kept: it vanishes at constant speed and
/// otherwise pulls nodes towards even spacing.
///
/// `log_p` and `score` are the log-density and its gradient at the point.
/// Returns `None` when the speed vanishes.
pub fn functional_derivative_at(
    vel: &[f64],
    acc: &[f64],
    log_p: f64,
    score: &[f64],
    projection: Projection,
) -> Option<Vec<f64>> {
    let speed = linalg::norm(vel);
    if !(speed > MIN_SPEED) {
        return None;
    }
    let unit = linalg::scale(vel, 1.0 / speed);
    let normal_score = linalg::reject(score, &unit);
    let inv_speed_sq = 1.0 / (speed * speed);
    let acc = match projection {
        Projection::Normal => linalg::reject(acc, &unit),
        _ => acc.to_vec(),
    };
    let bracket: Vec<f64> = normal_score
        .iter()
        .zip(&acc)
        .map(|(s, a)| s + a * inv_speed_sq)
        .collect();
    let factor = match projection {
        Projection::FullFuncDeriv | Projection::Normal => -speed * (-log_p).exp(),
        Projection::Rescaled => -1.0,
    };
    Some(linalg::scale(&bracket, factor))
}

/// `‖γ̈ + ‖γ̇‖²(I − γ̂γ̂ᵀ)∇log p‖` at one point; `None` when the speed vanishes.
pub fn el_residual_at(vel: &[f64], acc: &[f64], score: &[f64]) -> Option<f64> {
    let speed = linalg::norm(vel);
    if !(speed > MIN_SPEED) {
        return None;
    }
    let unit = linalg::scale(vel, 1.0 / speed);
    let normal_score = linalg::reject(score, &unit);
    let s2 = speed * speed;
    Some(
        acc.iter()
            .zip(&normal_score)
            .map(|(a, s)| (a + s2 * s).powi(2))
            .sum::<f64>()
            .sqrt(),
    )
}

/// `δS/δγ` at every node; the pinned endpoints get zero.
pub fn functional_derivative<F: DensityField + ?Sized>(
    path: &DiscretePath,
    density: &F,
    projection: Projection,
) -> Result<Vec<Vec<f64>>, GeodesicError> {
    let der = path_derivatives(path);
    let n = path.segments();
    let mut out = vec![vec![0.0; path.dim()]; n + 1];
    for i in 1..n {
        let (lp, s) = density.log_density_and_score(&path.nodes[i]);
        out[i] = functional_derivative_at(&der.vel[i], &der.acc[i], lp, &s, projection)
            .ok_or(GeodesicError::DegenerateSpeed { node: i })?;
    }
    Ok(out)
}

/// Euler–Lagrange residual at the interior nodes `1..N` (length `N − 1`).
pub fn el_residual<F: DensityField + ?Sized>(path: &DiscretePath, density: &F) -> Result<Vec<f64>, GeodesicError> {
    let der = path_derivatives(path);
    (1..path.segments())
        .map(|i| {
            let (_, s) = density.log_density_and_score(&path.nodes[i]);
            el_residual_at(&der.vel[i], &der.acc[i], &s).ok_or(GeodesicError::DegenerateSpeed { node: i })
        })
        .collect()
}

/// Position on a polyline: segment index and fraction along it.
#[derive(Clone, Copy)]
struct Cursor {
    seg: usize,
    frac: f64,
}

/// First point after `from` whose Euclidean distance to `from` equals `chord`.
fn advance(nodes: &[Vec<f64>], from: Cursor, chord: f64) -> Option<(Cursor, Vec<f64>)> {
    let q = linalg::lerp(&nodes[from.seg], &nodes[from.seg + 1], from.frac);
    for seg in from.seg..nodes.len() - 1 {
        let (a, b) = (&nodes[seg], &nodes[seg + 1]);
        let d = linalg::sub(b, a);
        let dd = linalg::norm_sq(&d);
        if dd == 0.0 {
            continue;
        }
        // ‖a + u·d − q‖² = chord², exit root of the quadratic
        let aq = linalg::sub(a, &q);
        let half_b = linalg::dot(&aq, &d);
        let c = linalg::norm_sq(&aq) - chord * chord;
        let disc = half_b * half_b - dd * c;
        if disc < 0.0 {
            continue;
        }
        let u = (-half_b + disc.sqrt()) / dd;
        let lo = if seg == from.seg { from.frac } else { 0.0 };
        if u >= lo && u <= 1.0 {
            return Some((Cursor { seg, frac: u }, linalg::lerp(a, b, u)));
        }
    }
    None
}

/// Walks `n − 1` equal chords from the start and returns the remaining gap to
/// the end minus `chord`; `None` if the walk runs off the end.
fn place_chords(nodes: &[Vec<f64>], n: usize, chord: f64) -> Option<(f64, Vec<Vec<f64>>)> {
    let mut cur = Cursor { seg: 0, frac: 0.0 };
    let mut out = Vec::with_capacity(n + 1);
    out.push(nodes[0].clone());
    for _ in 1..n {
        let (next, x) = advance(nodes, cur, chord)?;
        cur = next;
        out.push(x);
    }
    let gap = linalg::dist(out.last().unwrap(), &nodes[nodes.len() - 1]);
    Some((gap - chord, out))
}

/// Nodes moved along the polyline so that all `N` chords have equal length.
///
/// The common chord length is found by bisection; every new node lies on the
/// input polyline and the endpoints are copied unchanged. On a curved
/// polyline the result is slightly shorter than the input (chords cut corners).
/// Polylines that fold back on themselves fall back to equal arc-length spacing.
pub fn resample_constant_speed(path: &DiscretePath) -> DiscretePath {
    let n = path.segments();
    let nodes = &path.nodes;
    let total = path.polyline_length();
    if total == 0.0 {
        return path.clone();
    }
    let (mut lo, mut hi) = (0.0, total / n as f64 * (1.0 + 1e-9));
    let mut best: Option<Vec<Vec<f64>>> = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match place_chords(nodes, n, mid) {
            Some((excess, pts)) if excess >= 0.0 => {
                lo = mid;
                best = Some(pts);
            }
            _ => hi = mid,
        }
    }
    let Some(mut out) = best else {
        return resample_arc_length(path);
    };
    let last = linalg::dist(&out[n - 1], &nodes[n]);
    if (last - lo).abs() > 1e-9 * lo {
        // folded polylines have no continuous equal-chord solution
        return resample_arc_length(path);
    }
    out.push(nodes[n].clone());
    DiscretePath { nodes: out }
}

/// Nodes at equal arc length along the input polyline.
fn resample_arc_length(path: &DiscretePath) -> DiscretePath {
    let n = path.segments();
    let nodes = &path.nodes;
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for w in nodes.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + linalg::dist(&w[0], &w[1]));
    }
    let total = cum[n];
    let mut out = Vec::with_capacity(n + 1);
    out.push(nodes[0].clone());
    let mut seg = 0;
    for k in 1..n {
        let target = total * k as f64 / n as f64;
        while seg + 1 < n && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let frac = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
        out.push(linalg::lerp(&nodes[seg], &nodes[seg + 1], frac));
    }
    out.push(nodes[n].clone());
    DiscretePath { nodes: out }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub resample_every: usize,
    pub projection: Projection,
    /// Halve the step until the action does not increase.
    pub line_search: bool,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            iterations: 2000,
            resample_every: 10,
            projection: Projection::FullFuncDeriv,
            line_search: true,
        }
    }
}

impl GeodesicConfig {
    pub fn validate(&self) -> Result<(), GeodesicError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(GeodesicError::Config("step_size must be positive".into()));
        }
        if self.resample_every == 0 {
            return Err(GeodesicError::Config("resample_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedPath {
    pub path: DiscretePath,
    /// Action before the first iteration, then after every iteration.
    pub history: Vec<f64>,
    /// History indices whose value was produced by a resampling step.
    pub resampled: Vec<usize>,
}

impl OptimizedPath {
    pub fn final_action(&self) -> f64 {
        *self.history.last().expect("history starts with the initial action")
    }
}

const STALL_FACTOR: f64 = 1e-12;

/// Gradient descent on the action along `−δS/δγ` with periodic arc-length resampling.
pub fn optimize_path<F: DensityField + ?Sized>(
    path: &DiscretePath,
    density: &F,
    cfg: &GeodesicConfig,
) -> Result<OptimizedPath, GeodesicError> {
    cfg.validate()?;
    let mut current_path = path.clone();
    let mut current = action(&current_path, density);
    let mut history = vec![current];
    let mut resampled = Vec::new();
    if path.start() == path.end() {
        return Ok(OptimizedPath {
            path: current_path,
            history,
            resampled,
        });
    }
    let n = path.segments();
    let mut step = cfg.step_size;
    let mut increases = 0;
    for it in 0..cfg.iterations {
        let grad = functional_derivative(&current_path, density, cfg.projection)?;
        if grad.iter().all(|g| g.iter().all(|v| *v == 0.0)) {
            break;
        }
        let mut accepted = None;
        loop {
            let mut nodes = current_path.nodes.clone();
            for i in 1..n {
                linalg::axpy(&mut nodes[i], -step, &grad[i]);
            }
            let trial = DiscretePath { nodes };
            let a = action(&trial, density);
            if !cfg.line_search {
                if !a.is_finite() {
                    history.push(a);
                    return Err(GeodesicError::NonFinite { iteration: it, history });
                }
                accepted = Some((trial, a));
                break;
            }
            if a.is_finite() && a <= current {
                accepted = Some((trial, a));
                step = (step * 1.5).min(cfg.step_size);
                break;
            }
            step *= 0.5;
            if step < cfg.step_size * STALL_FACTOR {
                break;
            }
        }
        let Some((trial, a)) = accepted else { break };
        if a > current {
            increases += 1;
            if increases >= 10 {
                history.push(a);
                return Err(GeodesicError::Diverged {
                    consecutive: increases,
                    history,
                });
            }
        } else {
            increases = 0;
        }
        current_path = trial;
        current = a;
        if (it + 1) % cfg.resample_every == 0 {
            current_path = resample_constant_speed(&current_path);
            current = action(&current_path, density);
            resampled.push(history.len());
        }
        history.push(current);
    }
    Ok(OptimizedPath {
        path: current_path,
        history,
        resampled,
    })
}

/// Axis-aligned box `[lo, hi]` in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Bounds {
    pub fn contains(&self, x: &[f64]) -> bool {
        (0..2).all(|k| x[k] >= self.lo[k] && x[k] <= self.hi[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OraclePath {
    pub points: Vec<Vec<f64>>,
    pub action: f64,
}

#[derive(Copy, Clone, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| self.node.cmp(&other.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Polyline action with each edge weighted by the mean of `1/p` at its ends.
pub fn polyline_action<F: DensityField + ?Sized>(points: &[Vec<f64>], density: &F) -> f64 {
    let inv: Vec<f64> = points.iter().map(|x| (-density.log_density(x)).exp()).collect();
    points
        .windows(2)
        .zip(inv.windows(2))
        .map(|(w, c)| linalg::dist(&w[0], &w[1]) * 0.5 * (c[0] + c[1]))
        .sum()
}

/// Dijkstra on an 8-connected `resolution × resolution` lattice over `bounds`.
///
/// Edge weight is Euclidean length times the mean of `1/p` at the two ends.
/// The returned polyline starts at `x0`, follows lattice nodes and ends at `x1`.
pub fn grid_geodesic_oracle<F: DensityField + ?Sized>(
    density: &F,
    x0: &[f64],
    x1: &[f64],
    bounds: Bounds,
    resolution: usize,
) -> Result<OraclePath, GeodesicError> {
    if x0.len() != 2 || density.dim() != 2 {
        return Err(GeodesicError::NotPlanar(x0.len().max(density.dim())));
    }
    if resolution < 2 {
        return Err(GeodesicError::Config("resolution must be at least 2".into()));
    }
    for x in [x0, x1] {
        if !bounds.contains(x) {
            return Err(GeodesicError::OutsideBounds(x.to_vec()));
        }
    }
    let r = resolution;
    let h = [
        (bounds.hi[0] - bounds.lo[0]) / (r - 1) as f64,
        (bounds.hi[1] - bounds.lo[1]) / (r - 1) as f64,
    ];
    let point = |idx: usize| vec![bounds.lo[0] + (idx % r) as f64 * h[0], bounds.lo[1] + (idx / r) as f64 * h[1]];
    let inv_density: Vec<f64> = par::map_range(r * r, |idx| (-density.log_density(&point(idx))).exp());
    let snap = |x: &[f64]| {
        let i = ((x[0] - bounds.lo[0]) / h[0]).round() as usize;
        let j = ((x[1] - bounds.lo[1]) / h[1]).round() as usize;
        j.min(r - 1) * r + i.min(r - 1)
    };
    let (src, dst) = (snap(x0), snap(x1));

    let mut dist = vec![f64::INFINITY; r * r];
    let mut prev = vec![usize::MAX; r * r];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Frontier { cost: 0.0, node: src });
    const MOVES: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    while let Some(Frontier { cost, node }) = heap.pop() {
        if node == dst {
            break;
        }
        if cost > dist[node] {
            continue;
        }
        let (i, j) = ((node % r) as isize, (node / r) as isize);
        for (di, dj) in MOVES {
            let (ni, nj) = (i + di, j + dj);
            if ni < 0 || nj < 0 || ni >= r as isize || nj >= r as isize {
                continue;
            }
            let next = nj as usize * r + ni as usize;
            let len = ((di as f64 * h[0]).powi(2) + (dj as f64 * h[1]).powi(2)).sqrt();
            let c = cost + len * 0.5 * (inv_density[node] + inv_density[next]);
            if c < dist[next] {
                dist[next] = c;
                prev[next] = node;
                heap.push(Frontier { cost: c, node: next });
            }
        }
    }
    let mut lattice = vec![dst];
    while let Some(&last) = lattice.last() {
        if last == src {
            break;
        }
        lattice.push(prev[last]);
    }
    lattice.reverse();
    let mut points = vec![x0.to_vec()];
    for idx in lattice {
        let p = point(idx);
        if linalg::dist(&p, points.last().unwrap()) > 0.0 {
            points.push(p);
        }
    }
    if linalg::dist(points.last().unwrap(), x1) > 0.0 {
        points.push(x1.to_vec());
    }
    let action = polyline_action(&points, density);
    Ok(OraclePath { points, action })
}
