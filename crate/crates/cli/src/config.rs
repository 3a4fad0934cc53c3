//! Run configuration: one JSON document with a section per module, unknown keys rejected.

use std::path::Path;

use gfm_core::density::{ConditionedDensity, GaussianMixture, NoiseSchedule, Reference};
use gfm_core::distill::DistillConfig;
use gfm_core::flowmatch::{FmConfig, Interpolant, Method};
use gfm_core::geodesic::{Bounds, GeodesicConfig};
use gfm_core::rng;
use gfm_core::tasks::{self, PairedSample, RotationTaskConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Run directory name under the output root.
    pub name: String,
    /// Seeds data generation and every trained network; overrides module seeds.
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub geodesic: GeodesicSection,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub flowmatch: FlowSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_n_test() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Pairs sharing their noise draw between two labelled mixture components.
    GmmBridge {
        n_pairs: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        var: f64,
        labels: Vec<usize>,
        modes: [usize; 2],
    },
    /// Warped rotations of a ring mixture, conditioned on the rotation angle.
    Rotation {
        #[serde(default = "default_n_test")]
        n_test: usize,
        #[serde(default)]
        setup: RotationTaskConfig,
    },
    /// `x1 = x0 + offset` with standard normal sources.
    Offset {
        n_pairs: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        offset: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub reference: Reference,
    pub schedule: NoiseSchedule,
    /// Ring components of the rotation task's view density.
    pub view_modes: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            reference: Reference::Flat,
            schedule: NoiseSchedule::default(),
            view_modes: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeodesicSection {
    /// Training pairs solved directly.
    pub pairs: usize,
    pub segments: usize,
    pub solver: GeodesicConfig,
    /// Grid resolution of the shortest-path oracle (planar tasks only).
    pub oracle_resolution: Option<usize>,
    /// Oracle domain; a padded box around the endpoints when absent.
    pub bounds: Option<Bounds>,
}

impl Default for GeodesicSection {
    fn default() -> Self {
        Self {
            pairs: 4,
            segments: 32,
            solver: GeodesicConfig::default(),
            oracle_resolution: Some(256),
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    /// Interpolants trained by `train-fm`; each overrides `settings.interpolant`.
    pub modes: Vec<Interpolant>,
    pub settings: FmConfig,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            modes: vec![Interpolant::Linear, Interpolant::Geodesic],
            settings: FmConfig::default(),
        }
    }
}

impl FlowSection {
    pub fn for_mode(&self, mode: Interpolant) -> FmConfig {
        FmConfig {
            interpolant: mode,
            ..self.settings.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub nfe: Vec<usize>,
    pub method: Method,
    /// Test pairs whose full trajectories are written.
    pub trajectories: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            nfe: vec![10, 100],
            method: Method::Euler,
            trajectories: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test pairs used for residual and log-probability diagnostics.
    pub pairs: usize,
    /// Interior times of the residual curve.
    pub residual_times: usize,
    /// Nodes along each path for the relative log-probability.
    pub path_nodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pairs: 32,
            residual_times: 19,
            path_nodes: 65,
        }
    }
}

pub fn mode_name(mode: Interpolant) -> &'static str {
    match mode {
        Interpolant::Linear => "linear",
        Interpolant::Geodesic => "geodesic",
    }
}

/// Stream indices of the generated datasets.
const TRAIN_STREAM: u64 = 0x7a51;
const TEST_STREAM: u64 = 0x7e57;

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        Ok(cfg)
    }

    /// Reads, applies the seed override and validates.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.distill.seed = cfg.seed;
        cfg.flowmatch.settings.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.name.is_empty()
            || self.name == "."
            || self.name == ".."
            || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return bad(format!("name `{}` must be a plain directory name", self.name));
        }
        if self.geodesic.segments < 2 {
            return bad("geodesic.segments must be at least 2".into());
        }
        if self.sample.nfe.is_empty() || self.sample.nfe.contains(&0) {
            return bad("sample.nfe needs positive budgets".into());
        }
        if self.sample.method == Method::Heun && self.sample.nfe.iter().any(|n| n % 2 == 1) {
            return bad("sample.nfe must be even for heun".into());
        }
        if self.flowmatch.modes.is_empty() {
            return bad("flowmatch.modes is empty".into());
        }
        if self.eval.pairs == 0 || self.eval.residual_times == 0 || self.eval.path_nodes < 2 {
            return bad("eval needs pairs, residual times and at least two path nodes".into());
        }
        if self.density.view_modes == 0 {
            return bad("density.view_modes must be positive".into());
        }
        self.geodesic.solver.validate()?;
        self.distill.validate()?;
        for m in &self.flowmatch.modes {
            self.flowmatch.for_mode(*m).validate()?;
        }
        self.ambient_density()?;
        self.distill_density()?;
        Ok(())
    }

    /// SHA-256 of the effective configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(bytes))
    }

    pub fn n_test(&self) -> usize {
        match &self.task {
            TaskConfig::GmmBridge { n_test, .. } | TaskConfig::Rotation { n_test, .. } | TaskConfig::Offset { n_test, .. } => {
                *n_test
            }
        }
    }

    fn bridge_mixture(weights: &[f64], means: &[Vec<f64>], var: f64) -> Result<GaussianMixture, CliError> {
        Ok(GaussianMixture::isotropic(weights.to_vec(), means.to_vec(), var)?)
    }

    /// Density in data space used for path actions and diagnostics.
    pub fn ambient_density(&self) -> Result<GaussianMixture, CliError> {
        match &self.task {
            TaskConfig::GmmBridge { weights, means, var, .. } => Self::bridge_mixture(weights, means, *var),
            TaskConfig::Rotation { setup, .. } => {
                setup.validate()?;
                Ok(setup.view_density(self.density.view_modes)?)
            }
            TaskConfig::Offset { offset, .. } => {
                if offset.is_empty() {
                    return Err(CliError::Config("offset must be non-empty".into()));
                }
                Ok(GaussianMixture::standard_normal(offset.len()))
            }
        }
    }

    /// Conditioned density seen by distillation. Only the bridge carries labels.
    pub fn distill_density(&self) -> Result<ConditionedDensity, CliError> {
        let m = self.ambient_density()?;
        match &self.task {
            TaskConfig::GmmBridge { labels, .. } => Ok(ConditionedDensity::new(
                m,
                labels.clone(),
                self.density.reference,
                self.density.schedule,
            )?),
            _ => Ok(ConditionedDensity::unlabeled(m, self.density.reference, self.density.schedule)),
        }
    }

    fn generate(&self, n: usize, stream: u64) -> Result<Vec<PairedSample>, CliError> {
        let mut r = rng::stream(self.seed, stream);
        Ok(match &self.task {
            TaskConfig::GmmBridge { modes, .. } => {
                let cd = self.distill_density()?;
                tasks::make_gmm_bridge_task(n, &cd, (modes[0], modes[1]), &mut r)?
            }
            TaskConfig::Rotation { setup, .. } => {
                let setup = RotationTaskConfig {
                    n_pairs: n,
                    ..setup.clone()
                };
                tasks::make_rotation_task(&setup, &mut r)?
            }
            TaskConfig::Offset { offset, .. } => {
                let base = GaussianMixture::standard_normal(offset.len());
                tasks::make_offset_task(n, &base, offset, &mut r)?
            }
        })
    }

    pub fn train_data(&self) -> Result<Vec<PairedSample>, CliError> {
        let n = match &self.task {
            TaskConfig::GmmBridge { n_pairs, .. } | TaskConfig::Offset { n_pairs, .. } => *n_pairs,
            TaskConfig::Rotation { setup, .. } => setup.n_pairs,
        };
        self.generate(n, TRAIN_STREAM)
    }

    pub fn test_data(&self) -> Result<Vec<PairedSample>, CliError> {
        self.generate(self.n_test(), TEST_STREAM)
    }

    /// Training pairs as distillation sees them: unlabeled densities take the condition `[1]`.
    pub fn distill_data(&self) -> Result<Vec<PairedSample>, CliError> {
        let data = self.train_data()?;
        Ok(match self.task {
            TaskConfig::GmmBridge { .. } => data,
            _ => data
                .into_iter()
                .map(|p| PairedSample {
                    c0: vec![1.0],
                    c1: vec![1.0],
                    ..p
                })
                .collect(),
        })
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
