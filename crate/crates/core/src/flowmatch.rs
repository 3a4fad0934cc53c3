//! Data-to-data conditional flow matching with straight or geodesic interpolants.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{reverse_grad, Activation, DiffError};
use crate::linalg;
use crate::nets::optim::OptimizerConfig;
use crate::nets::{ArcTable, CorrectorNet, NetError, VelocityNet};
use crate::par;
use crate::rng::{self, Rng};
use crate::tasks::PairedSample;

#[derive(Debug, Error)]
pub enum FmError {
    #[error("invalid flow-matching config: {0}")]
    Config(String),
    #[error("geodesic interpolants need a distilled student corrector")]
    MissingStudent,
    #[error("dataset is empty")]
    Empty,
    #[error("{what} has dimension {found}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolant {
    #[default]
    Linear,
    Geodesic,
}

/// Distribution of training times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TSampling {
    /// `sigmoid(mean + std·n)`, `n` standard normal.
    LogitNormal { mean: f64, std: f64 },
    Uniform,
    /// Midpoints `(j + ½)/k` of a `k`-step Euler grid, chosen uniformly.
    DiscreteGrid { k: usize },
}

impl Default for TSampling {
    fn default() -> Self {
        TSampling::LogitNormal { mean: 0.0, std: 1.0 }
    }
}

impl TSampling {
    pub fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            TSampling::LogitNormal { mean, std } => 1.0 / (1.0 + (-(mean + std * rng::normal(rng))).exp()),
            TSampling::Uniform => rng::uniform(rng),
            TSampling::DiscreteGrid { k } => (rng::index(rng, k) as f64 + 0.5) / k as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FmConfig {
    pub interpolant: Interpolant,
    pub sigma_min: f64,
    /// Adds the `sigma_min` noise in geodesic mode too.
    pub geodesic_noise: bool,
    /// Traverses each geodesic interpolant at constant ambient speed.
    pub constant_speed: bool,
    /// Prepends the source point to the condition vector.
    pub source_condition: bool,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub t_sampling: TSampling,
    pub source_aug_strength: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub clip: Option<f64>,
    /// Cosine decay of the learning rate to zero over `steps`.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            interpolant: Interpolant::Linear,
            sigma_min: 0.01,
            geodesic_noise: false,
            constant_speed: false,
            source_condition: false,
            lr: 1e-3,
            steps: 2000,
            batch: 64,
            t_sampling: TSampling::default(),
            source_aug_strength: 0.0,
            hidden: vec![128, 128],
            activation: Activation::Silu,
            clip: Some(10.0),
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl FmConfig {
    pub fn validate(&self) -> Result<(), FmError> {
        let bad = |m: &str| Err(FmError::Config(m.into()));
        if !(self.sigma_min >= 0.0 && self.sigma_min.is_finite()) {
            return bad("sigma_min must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.source_aug_strength) {
            return bad("source_aug_strength must lie in [0, 1]");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be at least 1");
        }
        match self.t_sampling {
            TSampling::LogitNormal { mean, std } if !(mean.is_finite() && std >= 0.0 && std.is_finite()) => {
                return bad("logit-normal needs a finite mean and non-negative std");
            }
            TSampling::DiscreteGrid { k: 0 } => return bad("discrete grid needs k >= 1"),
            _ => {}
        }
        self.optimizer().validate().map_err(FmError::Config)
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::Adam {
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: self.clip,
        }
    }
}

/// `((1 − t)x0 + t x1 + σ_min ε, x1 − x0)`.
pub fn linear_interpolant(x0: &[f64], x1: &[f64], t: f64, sigma_min: f64, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let mut x = linalg::lerp(x0, x1, t);
    if sigma_min > 0.0 {
        for v in &mut x {
            *v += sigma_min * rng::normal(rng);
        }
    }
    (x, linalg::sub(x1, x0))
}

/// `((1 − t)x0 + t x1 + φ, x1 − x0 + ∂ₜφ)` from the student's exact time derivative.
pub fn geodesic_interpolant(
    student: &CorrectorNet,
    x0: &[f64],
    x1: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>), NetError> {
    let j = student.interpolant_jet(x0, x1, t)?;
    Ok((j.value, j.d1))
}

/// Samples per arc-length table of a constant-speed interpolant.
pub const ARC_SAMPLES: usize = 256;

/// The student's curve at arc-length fraction `s`, with velocity `L·γ̇/‖γ̇‖`.
pub fn constant_speed_interpolant(
    student: &CorrectorNet,
    table: &ArcTable,
    x0: &[f64],
    x1: &[f64],
    s: f64,
) -> Result<(Vec<f64>, Vec<f64>), NetError> {
    let j = student.interpolant_jet(x0, x1, table.param_at(s))?;
    let speed = linalg::norm(&j.d1);
    let v = if speed > 0.0 {
        linalg::scale(&j.d1, table.length() / speed)
    } else {
        linalg::sub(x1, x0)
    };
    Ok((j.value, v))
}

/// `cos(sπ/2)·x0 + sin(sπ/2)·ε`.
pub fn source_augment(x0: &[f64], strength: f64, rng: &mut Rng) -> Vec<f64> {
    if strength == 0.0 {
        return x0.to_vec();
    }
    let (s, c) = if strength == 1.0 {
        (1.0, 0.0)
    } else {
        (strength * FRAC_PI_2).sin_cos()
    };
    x0.iter().map(|x| c * x + s * rng::normal(rng)).collect()
}

/// Condition seen by the velocity field for source `x0` and target condition `c1`.
pub fn fm_condition(cfg: &FmConfig, x0: &[f64], c1: &[f64]) -> Vec<f64> {
    if cfg.source_condition {
        [x0, c1].concat()
    } else {
        c1.to_vec()
    }
}

/// One regression target of the flow-matching loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FmSample {
    pub x: Vec<f64>,
    pub t: f64,
    pub c: Vec<f64>,
    pub target: Vec<f64>,
}

/// Mean over the batch of `‖v(x, t, c) − target‖²`.
pub fn cfm_loss(v: &VelocityNet, batch: &[FmSample]) -> Result<f64, FmError> {
    let each = par::map_slice(batch, |s| -> Result<f64, NetError> {
        Ok(linalg::norm_sq(&linalg::sub(&v.eval(&s.x, s.t, &s.c)?, &s.target)))
    });
    let each = par::try_collect(each)?;
    Ok(each.iter().sum::<f64>() / batch.len().max(1) as f64)
}

/// [`cfm_loss`] and its gradient in the velocity parameters.
pub fn cfm_loss_gradient(v: &VelocityNet, batch: &[FmSample]) -> Result<(f64, Vec<f64>), FmError> {
    let parts = par::map_slice(batch, |s| {
        reverse_grad(v.params(), |tape| {
            let out = v.tape_eval(tape, &s.x, s.t, &s.c)?;
            let target = tape.input(&s.target)?;
            let r = tape.sub(out, target)?;
            tape.sum_squares(r)
        })
    });
    let parts = par::try_collect(parts)?;
    let n = batch.len().max(1) as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
    Ok((loss, linalg::scale(&par::sum_vectors(&grads, v.params().len()), 1.0 / n)))
}

/// Random draws behind one training sample, taken sequentially so batches are seed-stable.
struct Draw {
    index: usize,
    t: f64,
    x0: Vec<f64>,
    noise: Vec<f64>,
}

/// Arc-length tables of the student's interpolants when `cfg` traverses them at
/// constant speed from unaugmented sources; `None` otherwise.
pub fn arc_tables(
    data: &[PairedSample],
    student: Option<&CorrectorNet>,
    cfg: &FmConfig,
) -> Result<Option<Vec<ArcTable>>, FmError> {
    match student {
        Some(s) if cfg.interpolant == Interpolant::Geodesic && cfg.constant_speed && cfg.source_aug_strength == 0.0 => {
            let tables = par::map_slice(data, |p| ArcTable::new(s, &p.x0, &p.x1, ARC_SAMPLES));
            Ok(Some(par::try_collect(tables)?))
        }
        _ => Ok(None),
    }
}

/// Samples a training batch: pair index, time, augmented source and interpolant noise.
///
/// `tables` are the precomputed [`arc_tables`]; constant-speed targets are built
/// on the fly when they are absent.
pub fn make_batch(
    data: &[PairedSample],
    student: Option<&CorrectorNet>,
    tables: Option<&[ArcTable]>,
    cfg: &FmConfig,
    rng: &mut Rng,
) -> Result<Vec<FmSample>, FmError> {
    let noisy = match cfg.interpolant {
        Interpolant::Linear => cfg.sigma_min > 0.0,
        Interpolant::Geodesic => cfg.geodesic_noise && cfg.sigma_min > 0.0,
    };
    let draws: Vec<Draw> = (0..cfg.batch)
        .map(|_| {
            let index = rng::index(rng, data.len());
            let t = cfg.t_sampling.draw(rng);
            let x0 = source_augment(&data[index].x0, cfg.source_aug_strength, rng);
            let noise = if noisy {
                linalg::scale(&rng::normal_vec(rng, x0.len()), cfg.sigma_min)
            } else {
                Vec::new()
            };
            Draw { index, t, x0, noise }
        })
        .collect();
    let samples = par::map_slice(&draws, |d| -> Result<FmSample, FmError> {
        let pair = &data[d.index];
        let (mut x, target) = match (cfg.interpolant, student) {
            (Interpolant::Linear, _) => (linalg::lerp(&d.x0, &pair.x1, d.t), linalg::sub(&pair.x1, &d.x0)),
            (Interpolant::Geodesic, Some(s)) if cfg.constant_speed => match tables {
                Some(tab) => constant_speed_interpolant(s, &tab[d.index], &d.x0, &pair.x1, d.t)?,
                None => {
                    let tab = ArcTable::new(s, &d.x0, &pair.x1, ARC_SAMPLES)?;
                    constant_speed_interpolant(s, &tab, &d.x0, &pair.x1, d.t)?
                }
            },
            (Interpolant::Geodesic, Some(s)) => geodesic_interpolant(s, &d.x0, &pair.x1, d.t)?,
            (Interpolant::Geodesic, None) => return Err(FmError::MissingStudent),
        };
        if !d.noise.is_empty() {
            linalg::axpy(&mut x, 1.0, &d.noise);
        }
        Ok(FmSample {
            x,
            t: d.t,
            c: fm_condition(cfg, &pair.x0, &pair.c1),
            target,
        })
    });
    par::try_collect(samples)
}

fn check_dataset(data: &[PairedSample]) -> Result<(usize, usize), FmError> {
    let first = data.first().ok_or(FmError::Empty)?;
    let (dim, cond) = (first.x0.len(), first.c1.len());
    for s in data {
        for (what, expected, found) in [("x0", dim, s.x0.len()), ("x1", dim, s.x1.len()), ("c1", cond, s.c1.len())] {
            if found != expected {
                return Err(FmError::Dimension { what, expected, found });
            }
        }
    }
    Ok((dim, cond))
}

#[derive(Debug, Clone)]
pub struct FmOutput {
    pub net: VelocityNet,
    /// Pre-update batch loss of every step.
    pub history: Vec<f64>,
}

/// Trains a velocity field on `data`; the student, if any, is only read.
pub fn train_fm(data: &[PairedSample], student: Option<&CorrectorNet>, cfg: &FmConfig) -> Result<FmOutput, FmError> {
    cfg.validate()?;
    let (dim, cond) = check_dataset(data)?;
    if cfg.interpolant == Interpolant::Geodesic {
        let s = student.ok_or(FmError::MissingStudent)?;
        if s.dim() != dim {
            return Err(FmError::Dimension {
                what: "student",
                expected: dim,
                found: s.dim(),
            });
        }
    }
    let cond = if cfg.source_condition { cond + dim } else { cond };
    let mut net = VelocityNet::new(dim, cond, cfg.hidden.clone(), cfg.activation, cfg.seed)?;
    let mut opt = cfg.optimizer().build(net.params().len());
    let mut rng = rng::stream(cfg.seed, 0xf10e);
    let tables = arc_tables(data, student, cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = make_batch(data, student, tables.as_deref(), cfg, &mut rng)?;
        let (loss, grad) = cfm_loss_gradient(&net, &batch)?;
        if !loss.is_finite() || !linalg::is_finite(&grad) {
            return Err(FmError::NonFinite { what: "loss", step });
        }
        let scale = if cfg.cosine_decay {
            0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            1.0
        };
        opt.step_scaled(net.mlp_mut().params_mut(), &grad, scale);
        history.push(loss);
    }
    Ok(FmOutput { net, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Euler,
    Heun,
}

/// Result of integrating one source point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReport {
    /// Every state the field was evaluated at, then the endpoint; `nfe + 1` entries.
    ///
    /// For Heun the Euler predictor of each step sits between the step's start
    /// and end states.
    pub trajectory: Vec<Vec<f64>>,
    pub nfe: usize,
    pub endpoint: Vec<f64>,
}

/// Integrates `dx/dt = v(x, t, c)` from `x0` at `t = 0` to `t = 1` with `nfe` field evaluations.
pub fn sample(v: &VelocityNet, x0: &[f64], c: &[f64], nfe: usize, method: Method) -> Result<SampleReport, FmError> {
    let steps = match method {
        Method::Euler => nfe,
        Method::Heun if nfe % 2 == 0 => nfe / 2,
        Method::Heun => return Err(FmError::Config("heun needs an even number of evaluations".into())),
    };
    if steps == 0 {
        return Err(FmError::Config("nfe must be at least 1 (2 for heun)".into()));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    let mut trajectory = Vec::with_capacity(nfe + 1);
    trajectory.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * h;
        let d1 = v.eval(&x, t, c)?;
        let predictor = linalg::add(&x, &linalg::scale(&d1, h));
        x = match method {
            Method::Euler => predictor,
            Method::Heun => {
                if !linalg::is_finite(&predictor) {
                    return Err(FmError::NonFinite { what: "state", step: k });
                }
                let d2 = v.eval(&predictor, t + h, c)?;
                trajectory.push(predictor);
                x.iter().zip(d1.iter().zip(&d2)).map(|(xi, (a, b))| xi + 0.5 * h * (a + b)).collect()
            }
        };
        if !linalg::is_finite(&x) {
            return Err(FmError::NonFinite { what: "state", step: k });
        }
        trajectory.push(x.clone());
    }
    Ok(SampleReport {
        endpoint: x,
        nfe,
        trajectory,
    })
}

/// Endpoints of [`sample`] for many sources, in input order.
pub fn sample_endpoints(
    v: &VelocityNet,
    sources: &[(Vec<f64>, Vec<f64>)],
    nfe: usize,
    method: Method,
) -> Result<Vec<Vec<f64>>, FmError> {
    let out = par::map_slice(sources, |(x0, c)| sample(v, x0, c, nfe, method).map(|r| r.endpoint));
    par::try_collect(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discrete_grid_draws_midpoints() {
        let mut r = rng::seeded(1);
        for _ in 0..100 {
            let t = TSampling::DiscreteGrid { k: 4 }.draw(&mut r);
            assert!([0.125, 0.375, 0.625, 0.875].contains(&t));
        }
    }

    #[test]
    fn logit_normal_stays_inside() {
        let mut r = rng::seeded(2);
        for _ in 0..1000 {
            let t = TSampling::default().draw(&mut r);
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn heun_rejects_odd_budget() {
        let v = VelocityNet::new(2, 0, vec![4], Activation::Tanh, 0).unwrap();
        assert!(matches!(sample(&v, &[0.0, 0.0], &[], 3, Method::Heun), Err(FmError::Config(_))));
        assert!(matches!(sample(&v, &[0.0, 0.0], &[], 0, Method::Euler), Err(FmError::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(FmConfig::default().validate().is_ok());
        let bad = FmConfig {
            sigma_min: -1.0,
            ..FmConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FmConfig {
            t_sampling: TSampling::DiscreteGrid { k: 0 },
            ..FmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
