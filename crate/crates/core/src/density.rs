//! Analytic density fields.
//!
//! Diagonal Gaussian mixtures give exact log-densities and scores, and their
//! variance-preserving smoothing `√ᾱ·X + √(1−ᾱ)·ε` is again a mixture in
//! closed form. That makes the smoothed space, its guided score and the
//! probability-flow ODE between data and smoothed space all computable
//! without a learned denoiser.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::{self, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error("mixture has no components")]
    Empty,
    #[error("mixture weights must be non-negative and sum to 1 (sum = {0})")]
    Weights(f64),
    #[error("component {component}: variances must be finite and positive")]
    Variance { component: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("alpha_bar must lie in (0, 1], got {0}")]
    AlphaBar(f64),
    #[error("invalid condition vector: {0}")]
    Condition(String),
    #[error("smoothing time must lie in (0, 1), got {0}")]
    Tau(f64),
    #[error("ODE needs at least one step")]
    Steps,
    #[error("non-finite ODE state at step {step}")]
    NonFinite { step: usize },
    #[error("task needs at least {needed} condition labels, density has {found}")]
    TooFewModes { needed: usize, found: usize },
}

/// A strictly positive density with an exact score.
pub trait DensityField: Sync {
    fn dim(&self) -> usize;
    fn log_density_and_score(&self, x: &[f64]) -> (f64, Vec<f64>);

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_and_score(x).0
    }
}

impl DensityField for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn log_density_and_score(&self, x: &[f64]) -> (f64, Vec<f64>) {
        GaussianMixture::log_density_and_score(self, x)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        GaussianMixture::log_density(self, x)
    }
}

/// A mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    /// `ln wₖ − ½ Σ ln(2π σ²ₖᵢ)`
    log_norms: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
    ) -> Result<Self, DensityError> {
        if weights.is_empty() {
            return Err(DensityError::Empty);
        }
        let dim = means.first().map_or(0, Vec::len);
        if means.len() != weights.len() || vars.len() != weights.len() {
            return Err(DensityError::Dimension {
                expected: weights.len(),
                found: means.len().min(vars.len()),
            });
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(DensityError::Weights(total));
        }
        for (k, (m, v)) in means.iter().zip(&vars).enumerate() {
            if m.len() != dim || v.len() != dim {
                return Err(DensityError::Dimension {
                    expected: dim,
                    found: m.len().min(v.len()),
                });
            }
            if v.iter().any(|s| !(s.is_finite() && *s > 0.0)) || !linalg::is_finite(m) {
                return Err(DensityError::Variance { component: k });
            }
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_norms = weights
            .iter()
            .zip(&vars)
            .map(|(w, v)| w.ln() - 0.5 * v.iter().map(|s| LN_2PI + s.ln()).sum::<f64>())
            .collect();
        Ok(Self {
            weights,
            means,
            vars,
            log_norms,
        })
    }

    /// Mixture whose components share one isotropic variance.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, var: f64) -> Result<Self, DensityError> {
        let vars = means.iter().map(|m| vec![var; m.len()]).collect();
        Self::new(weights, means, vars)
    }

    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self, DensityError> {
        Self::new(vec![1.0], vec![mean], vec![var])
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::gaussian(vec![0.0; dim], vec![1.0; dim]).expect("valid standard normal")
    }

    /// `k` equal-weight components spaced evenly on a circle in the first two coordinates.
    pub fn ring(dim: usize, k: usize, radius: f64, var: f64) -> Result<Self, DensityError> {
        if dim < 2 {
            return Err(DensityError::Dimension { expected: 2, found: dim });
        }
        let means = (0..k)
            .map(|j| {
                let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * a.cos();
                m[1] = radius * a.sin();
                m
            })
            .collect();
        Self::isotropic(vec![1.0 / k as f64; k], means, var)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.vars
    }

    fn check_dim(&self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "point dimension does not match mixture");
    }

    /// Log-density and score of the mixture smoothed to `abar`, without materialising it.
    fn eval_smoothed(&self, x: &[f64], abar: f64, want_score: bool) -> (f64, Vec<f64>) {
        self.check_dim(x);
        let a_sqrt = abar.sqrt();
        let d = x.len();
        let mut logs = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            if self.weights[k] == 0.0 {
                logs.push(f64::NEG_INFINITY);
                continue;
            }
            let mut q = 0.0;
            let mut log_det = 0.0;
            for i in 0..d {
                let var = abar * self.vars[k][i] + (1.0 - abar);
                let r = x[i] - a_sqrt * self.means[k][i];
                q += r * r / var;
                if abar != 1.0 {
                    log_det += LN_2PI + var.ln();
                }
            }
            let norm = if abar == 1.0 {
                self.log_norms[k]
            } else {
                self.weights[k].ln() - 0.5 * log_det
            };
            logs.push(norm - 0.5 * q);
        }
        let lse = linalg::log_sum_exp(&logs);
        if !want_score {
            return (lse, Vec::new());
        }
        let mut score = vec![0.0; d];
        for (k, lk) in logs.iter().enumerate() {
            let resp = (lk - lse).exp();
            if resp == 0.0 {
                continue;
            }
            for i in 0..d {
                let var = abar * self.vars[k][i] + (1.0 - abar);
                score[i] -= resp * (x[i] - a_sqrt * self.means[k][i]) / var;
            }
        }
        (lse, score)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.eval_smoothed(x, 1.0, false).0
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// `∇ₓ log p(x)`: responsibility-weighted component scores.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        self.eval_smoothed(x, 1.0, true).1
    }

    pub fn log_density_and_score(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.eval_smoothed(x, 1.0, true)
    }

    /// Log-density and score of `smooth(self, abar)` at `x`.
    pub fn smoothed_log_density_and_score(&self, x: &[f64], abar: f64) -> (f64, Vec<f64>) {
        self.eval_smoothed(x, abar, true)
    }

    /// Exact law of `√abar·X + √(1−abar)·ε` for `X` from this mixture and `ε ∼ N(0, I)`.
    pub fn smooth(&self, abar: f64) -> Result<Self, DensityError> {
        if !(abar > 0.0 && abar <= 1.0) {
            return Err(DensityError::AlphaBar(abar));
        }
        let s = abar.sqrt();
        let means = self.means.iter().map(|m| linalg::scale(m, s)).collect();
        let vars = self
            .vars
            .iter()
            .map(|v| v.iter().map(|x| abar * x + (1.0 - abar)).collect())
            .collect();
        Self::new(self.weights.clone(), means, vars)
    }

    /// Draw from component `k` with standard-normal noise `eps`.
    pub fn component_point(&self, k: usize, eps: &[f64]) -> Vec<f64> {
        self.means[k]
            .iter()
            .zip(&self.vars[k])
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect()
    }

    /// Component index for a uniform draw `u ∈ [0, 1)`.
    pub fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let k = self.pick_component(rng::uniform(rng));
        let eps = rng::normal_vec(rng, self.dim());
        self.component_point(k, &eps)
    }
}

/// `ᾱ(τ)` for the smoothing time `τ ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSchedule {
    /// `β(t)` linear from `beta_min` to `beta_max`, `ᾱ(t) = exp(−∫₀ᵗ β)`.
    LinearVp { beta_min: f64, beta_max: f64 },
    /// `ᾱ(t) = cos²(π/2·(t+s)/(1+s)) / cos²(π/2·s/(1+s))`.
    Cosine { offset: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::LinearVp {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

const MIN_ALPHA_BAR: f64 = 1e-12;

impl NoiseSchedule {
    pub fn alpha_bar(&self, tau: f64) -> f64 {
        match *self {
            NoiseSchedule::LinearVp { beta_min, beta_max } => {
                (-(beta_min * tau + 0.5 * (beta_max - beta_min) * tau * tau)).exp()
            }
            NoiseSchedule::Cosine { offset } => {
                let f = |t: f64| ((t + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (f(tau) / f(0.0)).clamp(MIN_ALPHA_BAR, 1.0)
            }
        }
        .max(MIN_ALPHA_BAR)
    }

    /// `β(t) = −d/dt ln ᾱ(t)`.
    pub fn beta(&self, tau: f64) -> f64 {
        match *self {
            NoiseSchedule::LinearVp { beta_min, beta_max } => beta_min + (beta_max - beta_min) * tau,
            NoiseSchedule::Cosine { offset } => {
                let u = (tau + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
                (2.0 * u.tan() * std::f64::consts::FRAC_PI_2 / (1.0 + offset)).min(1e6)
            }
        }
    }

    /// `ω(τ) = −(1 − ᾱ(τ))^{−1/2}`, the factor turning noise predictions into scores.
    pub fn score_weight(&self, tau: f64) -> f64 {
        -1.0 / (1.0 - self.alpha_bar(tau)).sqrt()
    }
}

/// Branch subtracted in the guided score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The label-marginalised mixture.
    #[default]
    Unconditional,
    /// A uniform reference with zero score: guidance returns the plain conditional score.
    Flat,
}

/// A mixture whose components carry condition labels.
///
/// A condition vector `c` of length `num_labels` selects
/// `p(x | c) = Σ_l c_l p_l(x) / Σ_l c_l`, where `p_l` is the mixture
/// restricted to label `l`. One-hot vectors select a single class; linear
/// interpolations of them blend classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedDensity {
    mixture: GaussianMixture,
    labels: Vec<usize>,
    num_labels: usize,
    reference: Reference,
    schedule: NoiseSchedule,
}

impl ConditionedDensity {
    pub fn new(
        mixture: GaussianMixture,
        labels: Vec<usize>,
        reference: Reference,
        schedule: NoiseSchedule,
    ) -> Result<Self, DensityError> {
        if labels.len() != mixture.len() {
            return Err(DensityError::Dimension {
                expected: mixture.len(),
                found: labels.len(),
            });
        }
        let num_labels = labels.iter().max().map_or(1, |m| m + 1);
        for l in 0..num_labels {
            let mass: f64 = labels
                .iter()
                .zip(mixture.weights())
                .filter(|(lab, _)| **lab == l)
                .map(|(_, w)| w)
                .sum();
            if mass <= 0.0 {
                return Err(DensityError::Condition(format!("label {l} has no mass")));
            }
        }
        Ok(Self {
            mixture,
            labels,
            num_labels,
            reference,
            schedule,
        })
    }

    /// Every component under a single label; conditions are the vector `[1]`.
    pub fn unlabeled(mixture: GaussianMixture, reference: Reference, schedule: NoiseSchedule) -> Self {
        let labels = vec![0; mixture.len()];
        Self::new(mixture, labels, reference, schedule).expect("single label always has mass")
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn reference(&self) -> Reference {
        self.reference
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    pub fn unconditional(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.num_labels];
        c[label] = 1.0;
        c
    }

    /// `p(x | c)` as a mixture.
    pub fn conditional(&self, c: &[f64]) -> Result<GaussianMixture, DensityError> {
        if c.len() != self.num_labels {
            return Err(DensityError::Condition(format!(
                "expected {} entries, found {}",
                self.num_labels,
                c.len()
            )));
        }
        if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DensityError::Condition("entries must be finite and non-negative".into()));
        }
        let total: f64 = c.iter().sum();
        if total <= 0.0 {
            return Err(DensityError::Condition("condition has zero mass".into()));
        }
        let mut class_mass = vec![0.0; self.num_labels];
        for (l, w) in self.labels.iter().zip(self.mixture.weights()) {
            class_mass[*l] += w;
        }
        let mut weights: Vec<f64> = self
            .labels
            .iter()
            .zip(self.mixture.weights())
            .map(|(l, w)| w / class_mass[*l] * c[*l] / total)
            .collect();
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        GaussianMixture::new(
            weights,
            self.mixture.means().to_vec(),
            self.mixture.variances().to_vec(),
        )
    }

    fn check_abar(abar: f64) -> Result<(), DensityError> {
        if abar > 0.0 && abar <= 1.0 {
            Ok(())
        } else {
            Err(DensityError::AlphaBar(abar))
        }
    }

    /// `β·(∇log p_ᾱ(x|c) − ∇log p_ᾱ,ref(x))` with both branches smoothed to `abar`.
    pub fn guided_score(&self, x: &[f64], c: &[f64], beta: f64, abar: f64) -> Result<Vec<f64>, DensityError> {
        Ok(self.guided(x, c, beta, abar)?.1)
    }

    /// `β·(log p_ᾱ(x|c) − log p_ᾱ,ref(x))`, the log of the (unnormalised) guided density.
    pub fn guided_log_density(&self, x: &[f64], c: &[f64], beta: f64, abar: f64) -> Result<f64, DensityError> {
        Ok(self.guided(x, c, beta, abar)?.0)
    }

    /// Guided log-density and score in one pass.
    pub fn guided(&self, x: &[f64], c: &[f64], beta: f64, abar: f64) -> Result<(f64, Vec<f64>), DensityError> {
        Self::check_abar(abar)?;
        self.check_point(x)?;
        let (lc, sc) = self.conditional(c)?.smoothed_log_density_and_score(x, abar);
        let (lr, sr) = match self.reference {
            Reference::Unconditional => self.mixture.smoothed_log_density_and_score(x, abar),
            Reference::Flat => (0.0, vec![0.0; x.len()]),
        };
        let score = sc.iter().zip(&sr).map(|(a, b)| beta * (a - b)).collect();
        Ok((beta * (lc - lr), score))
    }

    fn check_point(&self, x: &[f64]) -> Result<(), DensityError> {
        if x.len() != self.dim() {
            return Err(DensityError::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Maps data to smoothing time `tau` along the probability-flow ODE.
    pub fn pf_ode_forward(&self, x: &[f64], c: &[f64], tau: f64, steps: usize) -> Result<Vec<f64>, DensityError> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(DensityError::Tau(tau));
        }
        self.integrate(x, c, 0.0, tau, steps)
    }

    /// Maps a point at smoothing time `tau` back to data along the same ODE.
    pub fn pf_ode_backward(&self, z: &[f64], c: &[f64], tau: f64, steps: usize) -> Result<Vec<f64>, DensityError> {
        if !(tau >= 0.0 && tau < 1.0) {
            return Err(DensityError::Tau(tau));
        }
        self.integrate(z, c, tau, 0.0, steps)
    }

    /// `dx/dt = −½ β(t) (x + ∇log p_t(x|c))`
    fn drift(&self, m: &GaussianMixture, x: &[f64], t: f64) -> Vec<f64> {
        let abar = self.schedule.alpha_bar(t);
        let (_, s) = m.smoothed_log_density_and_score(x, abar);
        let b = -0.5 * self.schedule.beta(t);
        x.iter().zip(&s).map(|(xi, si)| b * (xi + si)).collect()
    }

    /// Heun integration from `t0` to `t1` with fixed steps.
    fn integrate(&self, x: &[f64], c: &[f64], t0: f64, t1: f64, steps: usize) -> Result<Vec<f64>, DensityError> {
        if steps == 0 {
            return Err(DensityError::Steps);
        }
        self.check_point(x)?;
        let m = self.conditional(c)?;
        let h = (t1 - t0) / steps as f64;
        let mut state = x.to_vec();
        for step in 0..steps {
            let t = t0 + h * step as f64;
            let k1 = self.drift(&m, &state, t);
            let pred: Vec<f64> = state.iter().zip(&k1).map(|(s, k)| s + h * k).collect();
            let k2 = self.drift(&m, &pred, t + h);
            for ((s, a), b) in state.iter_mut().zip(&k1).zip(&k2) {
                *s += 0.5 * h * (a + b);
            }
            if !linalg::is_finite(&state) {
                return Err(DensityError::NonFinite { step });
            }
        }
        Ok(state)
    }
}
