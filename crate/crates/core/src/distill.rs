//! Teacher–student distillation of density geodesics.
//!
//! The teacher corrector bends interpolants between smoothed endpoints
//! `z = pf_ode_forward(x)` by descending the density-weighted action of the
//! guided smoothed density. The student corrector is regressed, in ambient
//! space, onto the teacher's interpolants mapped back by `pf_ode_backward`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::{ConditionedDensity, DensityError};
use crate::diffcore::{reverse_grad, Activation, DiffError};
use crate::geodesic::{functional_derivative_at, Projection};
use crate::linalg;
use crate::metrics::{self, MetricsError};
use crate::nets::optim::{Optimizer, OptimizerConfig};
use crate::nets::{CorrectorNet, NetError};
use crate::par;
use crate::rng::{self, Rng};
use crate::tasks::PairedSample;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("empty dataset")]
    Empty,
    #[error("probability-flow map failed at t = {t}: {source}")]
    Ode { t: f64, source: DensityError },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("teacher action rose for {epochs} consecutive epochs")]
    Diverged { epochs: usize, history: Vec<EpochRecord> },
}

/// Order of teacher and student updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// A teacher update followed by a student update on every batch.
    #[default]
    Alternating,
    /// All teacher epochs first, then all student epochs against the frozen teacher.
    PhaseSeparated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Smoothing time of the probability-flow map.
    pub tau: f64,
    /// Guidance scale of the smoothed score.
    pub beta: f64,
    /// Times sampled per pair and step.
    pub t_grid_size: usize,
    /// Fraction of each stratum the sampled times may move within.
    pub jitter: f64,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub teacher_rule: UpdateRule,
    pub student_rule: UpdateRule,
    /// Global gradient-norm clip for both networks.
    pub clip: f64,
    pub epochs: usize,
    /// Length of the student phase in phase-separated mode, `epochs` when absent.
    pub student_epochs: Option<usize>,
    pub ode_steps: usize,
    pub batch_size: usize,
    /// Student batch size when it should differ from `batch_size`.
    pub student_batch_size: Option<usize>,
    pub projection: Projection,
    pub mode: DistillMode,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Backtrack teacher steps that raise the batch action.
    pub line_search: bool,
    /// Trapezoid nodes for the smoothed action.
    pub action_nodes: usize,
    /// Pairs from the front of the dataset used for per-epoch monitoring.
    pub monitor_pairs: usize,
    /// Interior times of the monitored residual curve.
    pub monitor_times: usize,
    /// Consecutive epochs of rising teacher action tolerated before aborting.
    pub watchdog: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Sgd,
    Adam,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            beta: 1.0,
            t_grid_size: 8,
            jitter: 1.0,
            teacher_lr: 1e-6,
            student_lr: 1e-3,
            teacher_rule: UpdateRule::Sgd,
            student_rule: UpdateRule::Sgd,
            clip: 10.0,
            epochs: 50,
            student_epochs: None,
            ode_steps: 30,
            batch_size: 16,
            student_batch_size: None,
            projection: Projection::FullFuncDeriv,
            mode: DistillMode::Alternating,
            hidden: vec![128, 128],
            activation: Activation::Silu,
            seed: 0,
            line_search: true,
            action_nodes: 32,
            monitor_pairs: 16,
            monitor_times: 9,
            watchdog: 10,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.into()));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return bad("beta must be positive");
        }
        if self.t_grid_size == 0 || self.batch_size == 0 || self.ode_steps == 0 || self.student_batch_size == Some(0) {
            return bad("t_grid_size, batch_size and ode_steps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1]");
        }
        if !(self.teacher_lr > 0.0 && self.student_lr > 0.0 && self.clip > 0.0) {
            return bad("learning rates and clip must be positive");
        }
        if self.action_nodes < 2 || self.monitor_times == 0 || self.monitor_pairs == 0 {
            return bad("action_nodes must be at least 2 and monitor sizes at least 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be at least 1");
        }
        Ok(())
    }

    fn optimizer(&self, rule: UpdateRule, lr: f64) -> OptimizerConfig {
        match rule {
            UpdateRule::Sgd => OptimizerConfig::sgd(lr, Some(self.clip)),
            UpdateRule::Adam => OptimizerConfig::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                clip: Some(self.clip),
            },
        }
    }
}

/// Stratified interior times `(j + jitter·(u − ½))/(n + 1)`, `j = 1..n`.
pub fn time_sampler(n: usize, jitter: f64, rng: &mut Rng) -> Vec<f64> {
    let h = 1.0 / (n + 1) as f64;
    (1..=n)
        .map(|j| {
            let u = if jitter > 0.0 { rng::uniform(rng) - 0.5 } else { 0.0 };
            (j as f64 + jitter * u) * h
        })
        .collect()
}

/// One training pair with its smoothed endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPair {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
    pub c0: Vec<f64>,
    pub c1: Vec<f64>,
}

impl DistillPair {
    pub fn condition_at(&self, t: f64) -> Vec<f64> {
        linalg::lerp(&self.c0, &self.c1, t)
    }
}

/// Maps every pair's endpoints to smoothing time `tau`.
pub fn prepare_pairs(
    data: &[PairedSample],
    cd: &ConditionedDensity,
    cfg: &DistillConfig,
) -> Result<Vec<DistillPair>, DistillError> {
    let out = par::map_slice(data, |p| -> Result<DistillPair, DistillError> {
        let map = |x: &[f64], c: &[f64], t: f64| {
            cd.pf_ode_forward(x, c, cfg.tau, cfg.ode_steps)
                .map_err(|source| DistillError::Ode { t, source })
        };
        Ok(DistillPair {
            z0: map(&p.x0, &p.c0, 0.0)?,
            z1: map(&p.x1, &p.c1, 1.0)?,
            x0: p.x0.clone(),
            x1: p.x1.clone(),
            c0: p.c0.clone(),
            c1: p.c1.clone(),
        })
    });
    par::try_collect(out)
}

/// Trapezoidal action `∫‖ż‖ / p̃(z | c_t) dt` of the teacher interpolant under the guided smoothed density.
pub fn smoothed_action(
    teacher: &CorrectorNet,
    cd: &ConditionedDensity,
    pair: &DistillPair,
    cfg: &DistillConfig,
) -> Result<f64, DistillError> {
    let abar = cd.schedule().alpha_bar(cfg.tau);
    let n = cfg.action_nodes;
    let mut total = 0.0;
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let j = teacher.interpolant_jet(&pair.z0, &pair.z1, t)?;
        let lp = cd.guided_log_density(&j.value, &pair.condition_at(t), cfg.beta, abar)?;
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        total += w * linalg::norm(&j.d1) * (-lp).exp();
    }
    Ok(total / n as f64)
}

/// Mean smoothed action over `pairs`.
pub fn mean_smoothed_action(
    teacher: &CorrectorNet,
    cd: &ConditionedDensity,
    pairs: &[DistillPair],
    cfg: &DistillConfig,
) -> Result<f64, DistillError> {
    let each = par::try_collect(par::map_slice(pairs, |p| smoothed_action(teacher, cd, p, cfg)))?;
    Ok(each.iter().sum::<f64>() / pairs.len().max(1) as f64)
}

/// Functional derivatives along the teacher interpolants.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignal {
    /// `g` per pair and time, `None` where the speed vanished.
    pub g: Vec<Vec<Option<Vec<f64>>>>,
    /// Mean `‖g‖` over the usable entries.
    pub mean_norm: f64,
    pub skipped: usize,
}

/// Evaluates `g_t` at every `(pair, t)` with exact time derivatives of the interpolant.
pub fn teacher_signal(
    teacher: &CorrectorNet,
    cd: &ConditionedDensity,
    pairs: &[DistillPair],
    ts: &[f64],
    cfg: &DistillConfig,
) -> Result<TeacherSignal, DistillError> {
    let abar = cd.schedule().alpha_bar(cfg.tau);
    let rows = par::map_slice(pairs, |p| -> Result<Vec<Option<Vec<f64>>>, DistillError> {
        ts.iter()
            .map(|&t| {
                let j = teacher.interpolant_jet(&p.z0, &p.z1, t)?;
                let (lp, s) = cd.guided(&j.value, &p.condition_at(t), cfg.beta, abar)?;
                let g = functional_derivative_at(&j.d1, &j.d2, lp, &s, cfg.projection);
                if g.as_ref().is_some_and(|g| !linalg::is_finite(g)) {
                    return Err(DistillError::NonFinite { what: "functional derivative" });
                }
                Ok(g)
            })
            .collect()
    });
    let g = par::try_collect(rows)?;
    let norms: Vec<f64> = g.iter().flatten().flatten().map(|v| linalg::norm(v)).collect();
    let skipped = pairs.len() * ts.len() - norms.len();
    let mean_norm = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
    Ok(TeacherSignal { g, mean_norm, skipped })
}

/// Value and parameter gradient of `mean ⟨stop(g), z_t⟩`.
///
/// The endpoint lerp carries no parameters, so only the correction enters the
/// tape; `g` is a constant there.
pub fn surrogate_gradient(
    teacher: &CorrectorNet,
    pairs: &[DistillPair],
    ts: &[f64],
    signal: &TeacherSignal,
) -> Result<(f64, Vec<f64>), DistillError> {
    let n_params = teacher.params().len();
    let parts = par::map_range(pairs.len(), |i| -> Result<(f64, Vec<f64>), DistillError> {
        let p = &pairs[i];
        let mut loss = 0.0;
        let mut grad = vec![0.0; n_params];
        for (&t, g) in ts.iter().zip(&signal.g[i]) {
            let Some(g) = g else { continue };
            let (_, gr) = reverse_grad(teacher.params(), |tape| {
                let phi = teacher.tape_eval(tape, &p.z0, &p.z1, t)?;
                let gv = tape.input(g)?;
                tape.dot(gv, phi)
            })?;
            let z = teacher.interpolant(&p.z0, &p.z1, t)?;
            loss += linalg::dot(g, &z);
            linalg::axpy(&mut grad, 1.0, &gr);
        }
        Ok((loss, grad))
    });
    let parts = par::try_collect(parts)?;
    let count = signal.g.iter().flatten().filter(|g| g.is_some()).count().max(1) as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / count;
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
    let grad = linalg::scale(&par::sum_vectors(&grads, n_params), 1.0 / count);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherReport {
    pub loss: f64,
    pub mean_g_norm: f64,
    pub skipped: usize,
    pub action_before: f64,
    pub action_after: f64,
    /// Learning-rate multiplier that was applied, zero if every trial was rejected.
    pub step_scale: f64,
}

/// Teacher optimiser with its backtracking multiplier.
#[derive(Debug, Clone)]
pub struct TeacherState {
    optimizer: Optimizer,
    scale: f64,
}

impl TeacherState {
    pub fn new(cfg: &DistillConfig, n_params: usize) -> Self {
        Self {
            optimizer: cfg.optimizer(cfg.teacher_rule, cfg.teacher_lr).build(n_params),
            scale: 1.0,
        }
    }
}

const MAX_HALVINGS: usize = 12;

/// One teacher update on `pairs` at times `ts`.
pub fn teacher_step(
    teacher: &mut CorrectorNet,
    state: &mut TeacherState,
    cd: &ConditionedDensity,
    pairs: &[DistillPair],
    ts: &[f64],
    cfg: &DistillConfig,
) -> Result<TeacherReport, DistillError> {
    let signal = teacher_signal(teacher, cd, pairs, ts, cfg)?;
    let (loss, grad) = surrogate_gradient(teacher, pairs, ts, &signal)?;
    if !linalg::is_finite(&grad) {
        return Err(DistillError::NonFinite { what: "teacher gradient" });
    }
    let action_before = mean_smoothed_action(teacher, cd, pairs, cfg)?;
    let mut report = TeacherReport {
        loss,
        mean_g_norm: signal.mean_norm,
        skipped: signal.skipped,
        action_before,
        action_after: action_before,
        step_scale: 0.0,
    };
    if grad.iter().all(|g| *g == 0.0) {
        return Ok(report);
    }
    let saved = teacher.params().to_vec();
    for _ in 0..=MAX_HALVINGS {
        let mut trial = state.optimizer.clone();
        trial.step_scaled(teacher.mlp_mut().params_mut(), &grad, state.scale);
        let after = mean_smoothed_action(teacher, cd, pairs, cfg)?;
        if !cfg.line_search || after <= action_before {
            state.optimizer = trial;
            report.action_after = after;
            report.step_scale = state.scale;
            state.scale = (state.scale * 1.5).min(1.0);
            return Ok(report);
        }
        teacher.mlp_mut().params_mut().copy_from_slice(&saved);
        state.scale *= 0.5;
    }
    // no trial descended: drop the stale moments and start the next step afresh
    state.optimizer = state.optimizer.config().build(saved.len());
    state.scale = 1.0;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentReport {
    /// Mean `‖x_t − target‖²` before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Backward-mapped teacher interpolants `pf_ode_backward(z_t, c_t, τ)` per pair and time.
pub fn student_targets(
    teacher: &CorrectorNet,
    cd: &ConditionedDensity,
    pairs: &[DistillPair],
    ts: &[f64],
    cfg: &DistillConfig,
) -> Result<Vec<Vec<Vec<f64>>>, DistillError> {
    let rows = par::map_slice(pairs, |p| -> Result<Vec<Vec<f64>>, DistillError> {
        ts.iter()
            .map(|&t| {
                let z = teacher.interpolant(&p.z0, &p.z1, t)?;
                cd.pf_ode_backward(&z, &p.condition_at(t), cfg.tau, cfg.ode_steps)
                    .map_err(|source| DistillError::Ode { t, source })
            })
            .collect()
    });
    par::try_collect(rows)
}

/// Value and gradient of `mean ‖lerp + φ − target‖²`.
pub fn student_loss_gradient(
    student: &CorrectorNet,
    pairs: &[DistillPair],
    ts: &[f64],
    targets: &[Vec<Vec<f64>>],
) -> Result<(f64, Vec<f64>), DistillError> {
    let n_params = student.params().len();
    let parts = par::map_range(pairs.len(), |i| -> Result<(f64, Vec<f64>), DistillError> {
        let p = &pairs[i];
        let mut loss = 0.0;
        let mut grad = vec![0.0; n_params];
        for (&t, target) in ts.iter().zip(&targets[i]) {
            let offset = linalg::sub(&linalg::lerp(&p.x0, &p.x1, t), target);
            let (l, g) = reverse_grad(student.params(), |tape| {
                let phi = student.tape_eval(tape, &p.x0, &p.x1, t)?;
                let o = tape.input(&offset)?;
                let r = tape.add(phi, o)?;
                tape.sum_squares(r)
            })?;
            loss += l;
            linalg::axpy(&mut grad, 1.0, &g);
        }
        Ok((loss, grad))
    });
    let parts = par::try_collect(parts)?;
    let count = (pairs.len() * ts.len()).max(1) as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / count;
    let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
    Ok((loss, linalg::scale(&par::sum_vectors(&grads, n_params), 1.0 / count)))
}

/// One student update against the (frozen) teacher.
pub fn student_step(
    student: &mut CorrectorNet,
    optimizer: &mut Optimizer,
    teacher: &CorrectorNet,
    cd: &ConditionedDensity,
    pairs: &[DistillPair],
    ts: &[f64],
    cfg: &DistillConfig,
) -> Result<StudentReport, DistillError> {
    let targets = student_targets(teacher, cd, pairs, ts, cfg)?;
    let (loss, grad) = student_loss_gradient(student, pairs, ts, &targets)?;
    if !loss.is_finite() || !linalg::is_finite(&grad) {
        return Err(DistillError::NonFinite { what: "student gradient" });
    }
    let grad_norm = optimizer.step(student.mlp_mut().params_mut(), &grad);
    Ok(StudentReport { loss, grad_norm })
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean surrogate loss over the epoch's batches, NaN when the teacher was not trained.
    pub teacher_loss: f64,
    /// Mean pre-update student loss, NaN when the student was not trained.
    pub student_loss: f64,
    /// Mean smoothed action of the teacher on the monitor pairs after the epoch.
    pub action: f64,
    /// Mean ambient residual of the student interpolants on the monitor pairs.
    pub residual: f64,
}

impl EpochRecord {
    pub const HEADER: [&'static str; 5] = ["epoch", "teacher_loss", "student_loss", "action", "residual"];

    pub fn row(&self) -> Vec<f64> {
        vec![
            self.epoch as f64,
            self.teacher_loss,
            self.student_loss,
            self.action,
            self.residual,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub teacher: CorrectorNet,
    pub student: CorrectorNet,
    pub history: Vec<EpochRecord>,
    /// Smoothed action of the initial (linear) teacher on the monitor pairs.
    pub initial_action: f64,
}

struct Run<'a> {
    cd: &'a ConditionedDensity,
    cfg: &'a DistillConfig,
    pairs: Vec<DistillPair>,
    monitor: Vec<DistillPair>,
    rng: Rng,
    teacher: CorrectorNet,
    student: CorrectorNet,
    teacher_state: TeacherState,
    student_opt: Optimizer,
    history: Vec<EpochRecord>,
    rising: usize,
}

impl Run<'_> {
    fn batches(&mut self, size: usize) -> Vec<Vec<DistillPair>> {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(size)
            .map(|idx| idx.iter().map(|&i| self.pairs[i].clone()).collect())
            .collect()
    }

    fn epoch(&mut self, train_teacher: bool, train_student: bool) -> Result<(), DistillError> {
        let mut t_losses = Vec::new();
        let mut s_losses = Vec::new();
        let student_size = self.cfg.student_batch_size.unwrap_or(self.cfg.batch_size);
        let joint = train_teacher && train_student && student_size == self.cfg.batch_size;
        if train_teacher {
            for batch in self.batches(self.cfg.batch_size) {
                let ts = time_sampler(self.cfg.t_grid_size, self.cfg.jitter, &mut self.rng);
                let r = teacher_step(&mut self.teacher, &mut self.teacher_state, self.cd, &batch, &ts, self.cfg)?;
                t_losses.push(r.loss);
                if joint {
                    s_losses.push(self.student_update(&batch, &ts)?);
                }
            }
        }
        if train_student && !joint {
            for batch in self.batches(student_size) {
                let ts = time_sampler(self.cfg.t_grid_size, self.cfg.jitter, &mut self.rng);
                s_losses.push(self.student_update(&batch, &ts)?);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let action = mean_smoothed_action(&self.teacher, self.cd, &self.monitor, self.cfg)?;
        let residual = self.residual()?;
        if train_teacher {
            let previous = self.history.last().map(|r| r.action);
            if previous.is_some_and(|a| action > a) {
                self.rising += 1;
            } else {
                self.rising = 0;
            }
        }
        self.history.push(EpochRecord {
            epoch: self.history.len(),
            teacher_loss: mean(&t_losses),
            student_loss: mean(&s_losses),
            action,
            residual,
        });
        if self.rising >= self.cfg.watchdog {
            return Err(DistillError::Diverged {
                epochs: self.rising,
                history: self.history.clone(),
            });
        }
        Ok(())
    }

    fn student_update(&mut self, batch: &[DistillPair], ts: &[f64]) -> Result<f64, DistillError> {
        let r = student_step(
            &mut self.student,
            &mut self.student_opt,
            &self.teacher,
            self.cd,
            batch,
            ts,
            self.cfg,
        )?;
        Ok(r.loss)
    }

    fn residual(&self) -> Result<f64, DistillError> {
        let ends: Vec<(Vec<f64>, Vec<f64>)> = self.monitor.iter().map(|p| (p.x0.clone(), p.x1.clone())).collect();
        let curve = metrics::el_residual_curve(
            &self.student,
            self.cd.unconditional(),
            &ends,
            &metrics::interior_grid(self.cfg.monitor_times),
        )?;
        Ok(curve.mean_el_residual())
    }
}

/// Full distillation loop; deterministic given `cfg.seed`.
pub fn distill_run(
    data: &[PairedSample],
    cd: &ConditionedDensity,
    cfg: &DistillConfig,
) -> Result<DistillOutput, DistillError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DistillError::Empty);
    }
    let dim = cd.dim();
    let pairs = prepare_pairs(data, cd, cfg)?;
    let monitor = pairs[..cfg.monitor_pairs.min(pairs.len())].to_vec();
    let teacher = CorrectorNet::new(dim, cfg.hidden.clone(), cfg.activation, cfg.seed)?;
    let student = CorrectorNet::new(dim, cfg.hidden.clone(), cfg.activation, cfg.seed.wrapping_add(1))?;
    let n_params = teacher.params().len();
    let mut run = Run {
        cd,
        cfg,
        pairs,
        monitor,
        rng: rng::stream(cfg.seed, 0x5d15),
        teacher_state: TeacherState::new(cfg, n_params),
        student_opt: cfg.optimizer(cfg.student_rule, cfg.student_lr).build(n_params),
        teacher,
        student,
        history: Vec::new(),
        rising: 0,
    };
    let initial_action = mean_smoothed_action(&run.teacher, cd, &run.monitor, cfg)?;
    match cfg.mode {
        DistillMode::Alternating => {
            for _ in 0..cfg.epochs {
                run.epoch(true, true)?;
            }
        }
        DistillMode::PhaseSeparated => {
            for _ in 0..cfg.epochs {
                run.epoch(true, false)?;
            }
            for _ in 0..cfg.student_epochs.unwrap_or(cfg.epochs) {
                run.epoch(false, true)?;
            }
        }
    }
    Ok(DistillOutput {
        teacher: run.teacher,
        student: run.student,
        history: run.history,
        initial_action,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_sampler_without_jitter_is_the_midpoint_grid() {
        let mut r = rng::seeded(0);
        assert_eq!(time_sampler(3, 0.0, &mut r), vec![0.25, 0.5, 0.75]);
        let one = time_sampler(1, 1.0, &mut r);
        assert!((one[0] - 0.5).abs() <= 0.25);
    }

    #[test]
    fn jittered_times_stay_in_their_strata() {
        let mut r = rng::seeded(3);
        for n in 1..20 {
            let ts = time_sampler(n, 1.0, &mut r);
            for (j, t) in ts.iter().enumerate() {
                let centre = (j + 1) as f64 / (n + 1) as f64;
                assert!(*t > 0.0 && *t < 1.0);
                assert!((t - centre).abs() <= 0.5 / (n + 1) as f64);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            tau: 1.0,
            ..DistillConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
