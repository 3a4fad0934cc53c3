//! Synthetic paired-view datasets and camera-ray condition features.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csv::{self, CsvError};
use crate::density::{ConditionedDensity, DensityError, GaussianMixture};
use crate::persistence::{self, Container, ContainerHeader, PayloadKind, PersistError, Precision};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("ray direction has zero length")]
    ZeroDirection,
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid task config: {0}")]
    Config(String),
    #[error("bridge needs at least {needed} modes, density has {found}")]
    TooFewModes { needed: usize, found: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("dataset rows have inconsistent widths")]
    Ragged,
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn transpose(m: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| m[j][i]))
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    [0, 1, 2].map(|i| [0, 1, 2].map(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation by `angle` about the unit vector `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    [
        [c + x * x * k, x * y * k - z * s, x * z * k + y * s],
        [y * x * k + z * s, c + y * y * k, y * z * k - x * s],
        [z * x * k - y * s, z * y * k + x * s, c + z * z * k],
    ]
}

/// Plücker coordinates `(o × d̂, d̂)` of the ray through `o` with direction `d`.
pub fn plucker_embed(o: Vec3, d: Vec3) -> Result<[f64; 6], TaskError> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !(n > 0.0) {
        return Err(TaskError::ZeroDirection);
    }
    let u = d.map(|v| v / n);
    let m = cross(o, u);
    Ok([m[0], m[1], m[2], u[0], u[1], u[2]])
}

/// Camera-to-world pose with pinhole intrinsics shared by both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPose {
    pub origin: Vec3,
    /// Columns are the camera axes in world coordinates.
    pub rotation: Mat3,
    pub focal: f64,
    pub principal: [f64; 2],
}

impl CameraPose {
    pub fn new(origin: Vec3, rotation: Mat3, focal: f64, principal: [f64; 2]) -> Result<Self, TaskError> {
        let p = Self {
            origin,
            rotation,
            focal,
            principal,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(self.focal.is_finite() && self.focal != 0.0) {
            return Err(TaskError::Camera("focal length must be finite and non-zero".into()));
        }
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (v - target).abs() > 1e-10 {
                    return Err(TaskError::Camera("rotation is not orthonormal".into()));
                }
            }
        }
        if det(&self.rotation) < 0.0 {
            return Err(TaskError::Camera("rotation has determinant -1".into()));
        }
        Ok(())
    }

    /// Camera on a circle of `radius` in the x–z plane at azimuth `theta`, looking at the origin.
    pub fn orbit(theta: f64, radius: f64, focal: f64, principal: [f64; 2]) -> Result<Self, TaskError> {
        let origin = [radius * theta.sin(), 0.0, -radius * theta.cos()];
        Self::new(origin, axis_angle([0.0, 1.0, 0.0], -theta), focal, principal)
    }

    /// This pose expressed in the frame of `reference`.
    pub fn relative_to(&self, reference: &CameraPose) -> Result<Self, TaskError> {
        let rt = transpose(&reference.rotation);
        let d = [0, 1, 2].map(|i| self.origin[i] - reference.origin[i]);
        Self::new(mat_vec(&rt, d), mat_mul(&rt, &self.rotation), self.focal, self.principal)
    }
}

/// Plücker embedding of the ray through every pixel centre, row by row.
pub fn ray_grid(pose: &CameraPose, width: usize, height: usize) -> Result<Vec<[f64; 6]>, TaskError> {
    pose.validate()?;
    let mut out = Vec::with_capacity(width * height);
    for v in 0..height {
        for u in 0..width {
            let cam = [
                (u as f64 + 0.5 - pose.principal[0]) / pose.focal,
                (v as f64 + 0.5 - pose.principal[1]) / pose.focal,
                1.0,
            ];
            out.push(plucker_embed(pose.origin, mat_vec(&pose.rotation, cam))?);
        }
    }
    Ok(out)
}

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    /// Condition of the source view.
    pub c0: Vec<f64>,
    /// Condition of the target view; flow matching conditions on this.
    pub c1: Vec<f64>,
    pub meta: Vec<f64>,
}

/// `u + a·tanh(u)`, strictly increasing for `a > −1`.
pub fn warp(u: f64, a: f64) -> f64 {
    u + a * u.tanh()
}

pub fn warp_derivative(u: f64, a: f64) -> f64 {
    let t = u.tanh();
    1.0 + a * (1.0 - t * t)
}

/// Inverse of [`warp`] by safeguarded Newton iteration.
pub fn unwarp(y: f64, a: f64) -> f64 {
    let mut u = y / (1.0 + a.max(0.0));
    for _ in 0..100 {
        let step = (warp(u, a) - y) / warp_derivative(u, a);
        u -= step;
        if step.abs() <= 1e-15 * (1.0 + u.abs()) {
            break;
        }
    }
    u
}

/// Rotates each coordinate pair `(2i, 2i + 1)` by `theta`; a trailing odd coordinate is kept.
pub fn block_rotate(x: &[f64], theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = x.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub orbit_radius: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            focal: 8.0,
            orbit_radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationTaskConfig {
    pub n_pairs: usize,
    pub dim: usize,
    /// `Δθ` is drawn uniformly from this interval.
    pub angle_range: [f64; 2],
    pub ring_modes: usize,
    pub ring_radius: f64,
    pub ring_var: f64,
    pub warp: f64,
    pub rays: Option<RayConfig>,
}

impl Default for RotationTaskConfig {
    fn default() -> Self {
        Self {
            n_pairs: 512,
            dim: 2,
            angle_range: [0.5, 1.5],
            ring_modes: 8,
            ring_radius: 2.0,
            ring_var: 0.05,
            warp: 0.5,
            rays: None,
        }
    }
}

impl RotationTaskConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.dim < 2 {
            return Err(TaskError::Config("rotation task needs dim >= 2".into()));
        }
        if self.ring_modes == 0 || !(self.ring_var > 0.0) || !(self.ring_radius > 0.0) {
            return Err(TaskError::Config("ring needs modes, a positive radius and variance".into()));
        }
        if !(self.warp > -1.0) {
            return Err(TaskError::Config("warp strength must exceed -1".into()));
        }
        if !(self.angle_range[0] <= self.angle_range[1]) {
            return Err(TaskError::Config("angle_range must be ordered".into()));
        }
        Ok(())
    }

    pub fn base(&self) -> Result<GaussianMixture, TaskError> {
        Ok(GaussianMixture::ring(self.dim, self.ring_modes, self.ring_radius, self.ring_var)?)
    }

    /// Latent `z` seen from azimuth `theta`: block rotation, then elementwise warp.
    pub fn view(&self, z: &[f64], theta: f64) -> Vec<f64> {
        block_rotate(z, theta).into_iter().map(|u| warp(u, self.warp)).collect()
    }

    /// Ground-truth transport of a source view by `dtheta`.
    pub fn transport(&self, x0: &[f64], dtheta: f64) -> Vec<f64> {
        let z: Vec<f64> = x0.iter().map(|y| unwarp(*y, self.warp)).collect();
        self.view(&z, dtheta)
    }

    /// Width of the condition vector.
    pub fn cond_dim(&self) -> usize {
        2 + self.rays.as_ref().map_or(0, |r| 6 * r.width * r.height)
    }

    /// Condition for a view at relative azimuth `dtheta` from the source.
    pub fn condition(&self, dtheta: f64) -> Result<Vec<f64>, TaskError> {
        let mut c = vec![dtheta.cos(), dtheta.sin()];
        if let Some(r) = &self.rays {
            let principal = [r.width as f64 / 2.0, r.height as f64 / 2.0];
            let src = CameraPose::orbit(0.0, r.orbit_radius, r.focal, principal)?;
            let dst = CameraPose::orbit(dtheta, r.orbit_radius, r.focal, principal)?;
            for ray in ray_grid(&dst.relative_to(&src)?, r.width, r.height)? {
                c.extend_from_slice(&ray);
            }
        }
        Ok(c)
    }

    /// Density of rendered views, a warped copy of the base ring.
    ///
    /// Views at a uniformly random azimuth spread the ring into a continuous
    /// annulus; it is approximated by `modes` Gaussians on the warped circle
    /// with diagonal covariance `J Σ Jᵀ`, `J = diag(w′(μ))`.
    pub fn view_density(&self, modes: usize) -> Result<GaussianMixture, TaskError> {
        let ring = GaussianMixture::ring(self.dim, modes, self.ring_radius, self.ring_var)?;
        let means: Vec<Vec<f64>> = ring
            .means()
            .iter()
            .map(|m| m.iter().map(|u| warp(*u, self.warp)).collect())
            .collect();
        let vars = ring
            .means()
            .iter()
            .map(|m| {
                m.iter()
                    .map(|u| warp_derivative(*u, self.warp).powi(2) * self.ring_var)
                    .collect()
            })
            .collect();
        Ok(GaussianMixture::new(vec![1.0 / modes as f64; modes], means, vars)?)
    }
}

/// Pairs of views of the same latent: `x1` is `x0` seen from `Δθ` further round.
///
/// Conditions: `c0` is the source view relative to itself, `c1` the target view
/// relative to the source. `meta = (θ₀, Δθ)`.
pub fn make_rotation_task(cfg: &RotationTaskConfig, rng: &mut Rng) -> Result<Vec<PairedSample>, TaskError> {
    cfg.validate()?;
    let base = cfg.base()?;
    let c0 = cfg.condition(0.0)?;
    (0..cfg.n_pairs)
        .map(|_| {
            let z = base.sample(rng);
            let theta0 = rng::uniform_in(rng, 0.0, TAU);
            let dtheta = rng::uniform_in(rng, cfg.angle_range[0], cfg.angle_range[1]);
            Ok(PairedSample {
                x0: cfg.view(&z, theta0),
                x1: cfg.view(&z, theta0 + dtheta),
                c0: c0.clone(),
                c1: cfg.condition(dtheta)?,
                meta: vec![theta0, dtheta],
            })
        })
        .collect()
}

/// Coupled draws from two components sharing one noise vector.
///
/// `x0 = μ_a + σ_a ε`, `x1 = μ_b + σ_b ε`; conditions are the one-hot labels
/// of the two components. `meta` holds the component indices.
pub fn make_gmm_bridge_task(
    n_pairs: usize,
    cd: &ConditionedDensity,
    modes: (usize, usize),
    rng: &mut Rng,
) -> Result<Vec<PairedSample>, TaskError> {
    let m = cd.unconditional();
    if m.len() < 2 {
        return Err(TaskError::TooFewModes {
            needed: 2,
            found: m.len(),
        });
    }
    let (a, b) = modes;
    if a >= m.len() || b >= m.len() || a == b {
        return Err(TaskError::Config(format!("bridge modes ({a}, {b}) must be distinct components")));
    }
    let (ca, cb) = (cd.one_hot(cd.labels()[a]), cd.one_hot(cd.labels()[b]));
    Ok((0..n_pairs)
        .map(|_| {
            let eps = rng::normal_vec(rng, m.dim());
            PairedSample {
                x0: m.component_point(a, &eps),
                x1: m.component_point(b, &eps),
                c0: ca.clone(),
                c1: cb.clone(),
                meta: vec![a as f64, b as f64],
            }
        })
        .collect())
}

/// `x1 = x0 + offset` with `x0` drawn from `base`; no conditions.
pub fn make_offset_task(n_pairs: usize, base: &GaussianMixture, offset: &[f64], rng: &mut Rng) -> Result<Vec<PairedSample>, TaskError> {
    if offset.len() != base.dim() {
        return Err(TaskError::Config("offset dimension differs from base".into()));
    }
    Ok((0..n_pairs)
        .map(|_| {
            let x0 = base.sample(rng);
            let x1 = x0.iter().zip(offset).map(|(a, b)| a + b).collect();
            PairedSample {
                x0,
                x1,
                c0: vec![],
                c1: vec![],
                meta: vec![],
            }
        })
        .collect())
}

fn widths(data: &[PairedSample]) -> Result<(usize, usize, usize), TaskError> {
    let Some(first) = data.first() else {
        return Ok((0, 0, 0));
    };
    let w = (first.x0.len(), first.c0.len(), first.meta.len());
    for s in data {
        if s.x0.len() != w.0 || s.x1.len() != w.0 || s.c0.len() != w.1 || s.c1.len() != w.1 || s.meta.len() != w.2 {
            return Err(TaskError::Ragged);
        }
    }
    Ok(w)
}

fn row(s: &PairedSample) -> Vec<f64> {
    [&s.x0[..], &s.x1, &s.c0, &s.c1, &s.meta].concat()
}

pub fn dataset_to_container(data: &[PairedSample]) -> Result<Container, TaskError> {
    let (xd, cd, md) = widths(data)?;
    let dim = 2 * xd + 2 * cd + md;
    Ok(Container {
        header: ContainerHeader {
            kind: PayloadKind::PairedSamples,
            precision: Precision::F64,
            count: data.len() as u64,
            dim: dim as u64,
            aux: [xd as u32, cd as u32, md as u32, 0],
        },
        data: data.iter().flat_map(row).collect(),
    })
}

pub fn dataset_from_container(c: &Container) -> Result<Vec<PairedSample>, TaskError> {
    if c.header.kind != PayloadKind::PairedSamples {
        return Err(TaskError::Config("container does not hold paired samples".into()));
    }
    let [xd, cd, md, _] = c.header.aux.map(|v| v as usize);
    let dim = c.header.dim as usize;
    if dim != 2 * xd + 2 * cd + md {
        return Err(TaskError::Ragged);
    }
    if dim == 0 {
        return Ok(vec![PairedSample { x0: vec![], x1: vec![], c0: vec![], c1: vec![], meta: vec![] }; c.header.count as usize]);
    }
    Ok(c.data
        .chunks_exact(dim)
        .map(|r| {
            let (x0, r) = r.split_at(xd);
            let (x1, r) = r.split_at(xd);
            let (c0, r) = r.split_at(cd);
            let (c1, meta) = r.split_at(cd);
            PairedSample {
                x0: x0.to_vec(),
                x1: x1.to_vec(),
                c0: c0.to_vec(),
                c1: c1.to_vec(),
                meta: meta.to_vec(),
            }
        })
        .collect())
}

pub fn save_dataset(path: &Path, data: &[PairedSample]) -> Result<(), TaskError> {
    Ok(persistence::write_container(path, &dataset_to_container(data)?)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<PairedSample>, TaskError> {
    dataset_from_container(&persistence::read_container(path)?)
}

pub fn write_dataset_csv(path: &Path, data: &[PairedSample]) -> Result<(), TaskError> {
    let (xd, cd, md) = widths(data)?;
    let mut header = Vec::new();
    for (name, n) in [("x0", xd), ("x1", xd), ("c0", cd), ("c1", cd), ("meta", md)] {
        header.extend((0..n).map(|i| format!("{name}_{i}")));
    }
    csv::write_rows(path, &header, data.iter().map(row))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plucker_examples() {
        assert_eq!(plucker_embed([0.0; 3], [0.0, 0.0, 1.0]).unwrap(), [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(plucker_embed([1.0, 0.0, 0.0], [0.0, 0.0, 2.0]).unwrap(), [0.0, -1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(plucker_embed([1.0; 3], [0.0; 3]), Err(TaskError::ZeroDirection)));
    }

    #[test]
    fn identity_centre_pixel_looks_down_z() {
        let pose = CameraPose::new([0.0; 3], axis_angle([0.0, 0.0, 1.0], 0.0), 2.0, [1.5, 1.5]).unwrap();
        let grid = ray_grid(&pose, 3, 3).unwrap();
        assert_eq!(grid[4], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn degenerate_camera_rejected() {
        let r = axis_angle([0.0, 1.0, 0.0], 0.3);
        assert!(CameraPose::new([0.0; 3], r, 0.0, [0.0, 0.0]).is_err());
        let mut flip = r;
        flip[0] = flip[0].map(|v| -v);
        assert!(CameraPose::new([0.0; 3], flip, 1.0, [0.0, 0.0]).is_err());
    }

    #[test]
    fn orbit_cameras_face_the_origin() {
        for th in [0.0, 0.7, 2.5] {
            let p = CameraPose::orbit(th, 3.0, 4.0, [2.0, 2.0]).unwrap();
            let forward = mat_vec(&p.rotation, [0.0, 0.0, 1.0]);
            for k in 0..3 {
                assert!((forward[k] * 3.0 + p.origin[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_inverts() {
        for y in [-5.0, -0.3, 0.0, 0.01, 2.0, 40.0] {
            assert!((warp(unwarp(y, 0.5), 0.5) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let cfg = RotationTaskConfig::default();
        let z = [0.3, -1.7];
        assert_eq!(cfg.view(&z, 1.1), cfg.view(&z, 1.1 + 0.0));
        let x0 = cfg.view(&z, 0.4);
        let back = cfg.transport(&cfg.transport(&x0, 0.9), -0.9);
        assert!(x0.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn container_roundtrip() {
        let cfg = RotationTaskConfig {
            n_pairs: 7,
            rays: Some(RayConfig {
                width: 2,
                height: 2,
                ..Default::default()
            }),
            ..Default::default()
        };
        let data = make_rotation_task(&cfg, &mut rng::seeded(1)).unwrap();
        assert_eq!(data[0].c1.len(), cfg.cond_dim());
        let back = dataset_from_container(&dataset_to_container(&data).unwrap()).unwrap();
        assert_eq!(back, data);
    }
}
