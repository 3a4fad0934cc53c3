//! Path-geometry diagnostics and sample-set distances.

use thiserror::Error;

use crate::density::DensityField;
use crate::geodesic::{el_residual_at, functional_derivative_at, Projection};
use crate::linalg;
use crate::nets::{ArcTable, CorrectorNet, NetError};
use crate::par;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("empty sample set")]
    Empty,
    #[error("sets differ: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Velocities of `n + 1` points at `tᵢ = i/n`: central inside, one-sided second order at the ends.
fn sampled_velocities(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() - 1;
    let nf = n as f64;
    (0..=n)
        .map(|i| {
            let (a, b, c, k) = match i {
                0 => (&points[0], &points[1], &points[2], [-3.0, 4.0, -1.0]),
                i if i == n => (&points[n - 2], &points[n - 1], &points[n], [1.0, -4.0, 3.0]),
                i => (&points[i - 1], &points[i], &points[i + 1], [-1.0, 0.0, 1.0]),
            };
            (0..a.len())
                .map(|d| nf * 0.5 * (k[0] * a[d] + k[1] * b[d] + k[2] * c[d]))
                .collect()
        })
        .collect()
}

/// `log p(γ(tᵢ)) − log p(γ(0))` by trapezoidal integration of `⟨γ̇, ∇log p⟩`.
pub fn relative_log_prob<F: DensityField + ?Sized>(points: &[Vec<f64>], field: &F) -> Result<Vec<f64>, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::TooFewPoints {
            needed: 3,
            found: points.len(),
        });
    }
    let n = (points.len() - 1) as f64;
    let vel = sampled_velocities(points);
    let f: Vec<f64> = points
        .iter()
        .zip(&vel)
        .map(|(x, v)| linalg::dot(v, &field.log_density_and_score(x).1))
        .collect();
    let mut out = Vec::with_capacity(points.len());
    out.push(0.0);
    let mut acc = 0.0;
    for w in f.windows(2) {
        acc += 0.5 * (w[0] + w[1]) / n;
        out.push(acc);
    }
    Ok(out)
}

/// Mean geodesic diagnostics of a corrector's interpolants at each time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCurve {
    pub t: Vec<f64>,
    /// Mean `‖δS/δγ‖`.
    pub func_deriv: Vec<f64>,
    /// Mean `‖γ̈ + ‖γ̇‖²(I − γ̂γ̂ᵀ)∇log p‖`.
    pub el_residual: Vec<f64>,
    /// Mean residual of the curve reparameterised to constant speed, taken at
    /// arc-length fraction `t`: `L²‖(I − γ̂γ̂ᵀ)(γ̈/‖γ̇‖² + ∇log p)‖`.
    pub reparam_residual: Vec<f64>,
    /// Evaluations dropped for vanishing speed.
    pub skipped: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl ResidualCurve {
    pub fn mean_el_residual(&self) -> f64 {
        mean(&self.el_residual)
    }

    pub fn mean_reparam_residual(&self) -> f64 {
        mean(&self.reparam_residual)
    }
}

/// Samples of the interpolant's cumulative arc length used for reparameterisation.
const ARC_SAMPLES: usize = 256;

/// Geodesic diagnostics on `(1 − t)x0 + t x1 + φ(x0, x1, t)` with exact time derivatives.
pub fn el_residual_curve<F: DensityField + ?Sized>(
    net: &CorrectorNet,
    field: &F,
    pairs: &[(Vec<f64>, Vec<f64>)],
    t_grid: &[f64],
) -> Result<ResidualCurve, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let tables = par::try_collect(par::map_slice(pairs, |(x0, x1)| ArcTable::new(net, x0, x1, ARC_SAMPLES)))?;
    let per_t = par::map_slice(t_grid, |&t| -> Result<(f64, f64, f64, usize), NetError> {
        let mut sums = (0.0, 0.0, 0.0);
        let mut used = 0;
        for ((x0, x1), cum) in pairs.iter().zip(&tables) {
            let j = net.interpolant_jet(x0, x1, t)?;
            let (lp, s) = field.log_density_and_score(&j.value);
            let (Some(g), Some(r)) = (
                functional_derivative_at(&j.d1, &j.d2, lp, &s, Projection::FullFuncDeriv),
                el_residual_at(&j.d1, &j.d2, &s),
            ) else {
                continue;
            };
            let length = cum.length();
            let u = cum.param_at(t);
            let ju = net.interpolant_jet(x0, x1, u)?;
            let speed_sq = linalg::norm_sq(&ju.d1);
            if !(speed_sq > 0.0) {
                continue;
            }
            let su = field.log_density_and_score(&ju.value).1;
            let unit = linalg::scale(&ju.d1, 1.0 / speed_sq.sqrt());
            let inner: Vec<f64> = ju.d2.iter().zip(&su).map(|(a, si)| a / speed_sq + si).collect();
            sums.0 += linalg::norm(&g);
            sums.1 += r;
            sums.2 += length * length * linalg::norm(&linalg::reject(&inner, &unit));
            used += 1;
        }
        let k = used.max(1) as f64;
        Ok((sums.0 / k, sums.1 / k, sums.2 / k, pairs.len() - used))
    });
    let per_t = par::try_collect(per_t)?;
    Ok(ResidualCurve {
        t: t_grid.to_vec(),
        func_deriv: per_t.iter().map(|r| r.0).collect(),
        el_residual: per_t.iter().map(|r| r.1).collect(),
        reparam_residual: per_t.iter().map(|r| r.2).collect(),
        skipped: per_t.iter().map(|r| r.3).sum(),
    })
}

/// `k` interior times `j/(k+1)`.
pub fn interior_grid(k: usize) -> Vec<f64> {
    (1..=k).map(|j| j as f64 / (k + 1) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    /// `n · Σ‖Δᵢ‖²` over the `n` steps.
    pub ppl: f64,
    /// Mean angle between consecutive steps, in radians.
    pub turning: f64,
}

/// Euclidean path-length and turning statistics of a sampled path.
pub fn path_smoothness(points: &[Vec<f64>]) -> Result<Smoothness, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::TooFewPoints {
            needed: 3,
            found: points.len(),
        });
    }
    let steps: Vec<Vec<f64>> = points.windows(2).map(|w| linalg::sub(&w[1], &w[0])).collect();
    let ppl = steps.len() as f64 * steps.iter().map(|d| linalg::norm_sq(d)).sum::<f64>();
    let angles: Vec<f64> = steps
        .windows(2)
        .filter_map(|w| {
            let (a, b) = (linalg::norm(&w[0]), linalg::norm(&w[1]));
            (a > 0.0 && b > 0.0).then(|| (linalg::dot(&w[0], &w[1]) / (a * b)).clamp(-1.0, 1.0).acos())
        })
        .collect();
    let turning = mean(&angles);
    Ok(Smoothness { ppl, turning })
}

/// Mean pairwise distance between two sets, rows in parallel, reduced in order.
fn mean_cross_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows = par::map_slice(a, |x| b.iter().map(|y| linalg::dist(x, y)).sum::<f64>());
    rows.iter().sum::<f64>() / (a.len() * b.len()) as f64
}

/// `2E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` over all pairs (V-statistic).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::Empty);
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(MetricsError::Mismatch("point dimensions differ".into()));
    }
    let e = 2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b);
    // the V-statistic is a squared distance; only rounding can push it below zero
    Ok(e.max(0.0))
}

/// `sqrt(mean ‖pᵢ − gᵢ‖²)`.
pub fn endpoint_rmse(predicted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    if predicted.len() != truth.len() {
        return Err(MetricsError::Mismatch(format!("{} predictions, {} targets", predicted.len(), truth.len())));
    }
    let mut total = 0.0;
    for (p, g) in predicted.iter().zip(truth) {
        if p.len() != g.len() {
            return Err(MetricsError::Mismatch("point dimensions differ".into()));
        }
        total += linalg::norm_sq(&linalg::sub(p, g));
    }
    Ok((total / predicted.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::GaussianMixture;

    fn line(a: &[f64], b: &[f64], n: usize) -> Vec<Vec<f64>> {
        (0..=n).map(|i| linalg::lerp(a, b, i as f64 / n as f64)).collect()
    }

    #[test]
    fn gaussian_straight_path_log_prob() {
        let m = GaussianMixture::standard_normal(2);
        let r = relative_log_prob(&line(&[0.0, 0.0], &[1.0, 0.0], 512), &m).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[512] + 0.5).abs() < 1e-4);
    }

    #[test]
    fn smoothness_of_straight_line() {
        let s = path_smoothness(&line(&[1.0, 2.0], &[4.0, -2.0], 10)).unwrap();
        assert!((s.ppl - 25.0).abs() < 1e-12);
        assert!(s.turning.abs() < 1e-7);
        let corner = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        assert!((path_smoothness(&corner).unwrap().turning - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_of_identical_sets_is_zero() {
        let a: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn rmse_examples() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(endpoint_rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|x| vec![x[0] + 3.0, x[1] - 4.0]).collect();
        assert!((endpoint_rmse(&b, &a).unwrap() - 5.0).abs() < 1e-15);
        assert!(endpoint_rmse(&a, &a[..1]).is_err());
    }

    #[test]
    fn interior_grid_excludes_ends() {
        assert_eq!(interior_grid(3), vec![0.25, 0.5, 0.75]);
    }
}
