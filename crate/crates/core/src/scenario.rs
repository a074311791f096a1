//! Scenario documents: world, obstacles, sensing, sampling and cost
//! configuration. Loading fills every default so the serialized scenario is
//! the effective configuration of a run.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnt::CntOptions;
use crate::error::{Error, Result};
use crate::linalg;
use crate::steering::{CostWeights, CovSolverOptions};
use crate::sysmodels::{ModelKind, NonlinearModel, SensorModel};

pub const SCENARIO_SCHEMA_MAJOR: u32 = 1;

fn default_version() -> String {
    format!("{SCENARIO_SCHEMA_MAJOR}.0")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub schema_version: String,
    #[serde(default)]
    pub name: String,
    pub model: ModelConfig,
    pub sensing: SensingConfig,
    pub world: WorldBounds,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    /// Inflation applied to every obstacle in point-containment checks.
    #[serde(default)]
    pub robot_radius: f64,
    pub sampling: SamplingConfig,
    pub roadmap: RoadmapConfig,
    #[serde(default)]
    pub costs: CostConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub cnt: CntOptions,
    #[serde(default)]
    pub solver: CovSolverOptions,
    pub start: NodeSpec,
    pub goal: NodeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Steps per edge.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Per-state process-noise gains `g_i`; defaults to 0.1 on every state.
    #[serde(default)]
    pub noise_gains: Option<Vec<f64>>,
}

fn default_dt() -> f64 {
    0.2
}

fn default_horizon() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    pub landmarks: Vec<Vec<f64>>,
    #[serde(default = "default_eta_position")]
    pub eta_position: f64,
    #[serde(default = "default_eta_velocity")]
    pub eta_velocity: f64,
    /// Fixed-wing per-landmark noise scale.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_distance_floor")]
    pub distance_floor: f64,
}

fn default_eta_position() -> f64 {
    0.1
}

fn default_eta_velocity() -> f64 {
    0.2
}

fn default_eta() -> f64 {
    0.05
}

fn default_distance_floor() -> f64 {
    1e-3
}

/// Axis-aligned bounds of the workspace (position coordinates only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl WorldBounds {
    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&x, (&lo, &hi))| x >= lo && x <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    /// Simple polygon in the plane, vertices in order.
    Polygon { vertices: Vec<[f64; 2]> },
    /// Ball of the world's dimension (a disc in 2-D).
    Sphere { center: Vec<f64>, radius: f64 },
}

impl Obstacle {
    /// Point containment with the obstacle grown by `inflation`.
    pub fn contains(&self, p: &[f64], inflation: f64) -> bool {
        match self {
            Obstacle::Sphere { center, radius } => {
                let d2: f64 = p.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() <= radius + inflation
            }
            Obstacle::Polygon { vertices } => {
                let q = [p[0], p[1]];
                polygon_contains(vertices, q)
                    || (inflation > 0.0 && polygon_boundary_distance(vertices, q) <= inflation)
            }
        }
    }
}

/// Even-odd crossing test.
fn polygon_contains(vertices: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn polygon_boundary_distance(vertices: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NodeMode {
    /// Zero-velocity node means only.
    Stationary,
    /// Several sampled velocities (or headings) per position.
    Nonstationary,
}

/// Eigenvalue ranges for sampled covariances, split into the position block
/// and the remaining (velocity or heading) block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenRanges {
    pub position: [f64; 2],
    pub motion: [f64; 2],
}

impl Default for EigenRanges {
    fn default() -> Self {
        EigenRanges {
            position: [0.01, 0.25],
            motion: [0.01, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_mode")]
    pub mode: NodeMode,
    /// Number of sampled node positions (start and goal excluded).
    pub positions: usize,
    /// Positions used before any random draw, in order.
    #[serde(default)]
    pub fixed_positions: Vec<Vec<f64>>,
    /// Nodes per position in nonstationary mode.
    #[serde(default = "default_velocities_per_position")]
    pub velocities_per_position: usize,
    /// Make the first node at each position a zero-velocity node, so the
    /// nonstationary node set contains the stationary one.
    #[serde(default = "default_true")]
    pub include_zero_motion: bool,
    /// Double-integrator speed range for sampled velocities.
    #[serde(default = "default_speed_range")]
    pub speed_range: [f64; 2],
    /// Fixed-wing headings to choose from; uniform on the circle when absent.
    #[serde(default)]
    pub headings: Option<Vec<f64>>,
    #[serde(default)]
    pub hat_eigenvalues: EigenRanges,
    #[serde(default)]
    pub tilde_eigenvalues: EigenRanges,
    /// Rejection-sampling budget per position.
    #[serde(default = "default_max_draws")]
    pub max_draws: usize,
}

fn default_mode() -> NodeMode {
    NodeMode::Nonstationary
}

fn default_velocities_per_position() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_speed_range() -> [f64; 2] {
    [0.5, 1.5]
}

fn default_max_draws() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadmapConfig {
    /// Neighbor radius `d₁` on mean positions.
    pub neighbor_radius: f64,
    /// Slack in the filter admission test `P̃_{N−} ⪯ P̃_{j−} + tol·I`.
    #[serde(default = "default_admission_tol")]
    pub admission_tol: f64,
}

fn default_admission_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Diagonal of `Q_k`; zeros when absent.
    pub state_weight: Option<Vec<f64>>,
    /// Diagonal of `R_k`; ones when absent.
    pub control_weight: Option<Vec<f64>>,
    pub w_mean: f64,
    pub w_cov: f64,
    pub w_collision: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            state_weight: None,
            control_weight: None,
            w_mean: 1.0,
            w_cov: 1.0,
            w_collision: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    /// Rollouts per edge for the collision estimate.
    pub samples: usize,
    /// Path-level collision probability considered acceptable in reports.
    pub collision_threshold: f64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            samples: 500,
            collision_threshold: 0.05,
        }
    }
}

/// User-specified belief for the start and goal nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub mean: Vec<f64>,
    /// Rows of `P̂₋`.
    pub p_hat_prior: Vec<Vec<f64>>,
    /// Rows of `P̃₋`.
    pub p_tilde_prior: Vec<Vec<f64>>,
}

impl NodeSpec {
    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn p_hat_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.p_hat_prior)
    }

    pub fn p_tilde_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.p_tilde_prior)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

/// Parse, fill defaults and validate a scenario document.
pub fn load_scenario(document: &str) -> Result<Scenario> {
    let value: serde_json::Value = serde_json::from_str(document)?;
    if let Some(v) = value.get("schema_version") {
        let found = v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string());
        let major = found.split('.').next().and_then(|s| s.parse::<u32>().ok());
        if major != Some(SCENARIO_SCHEMA_MAJOR) {
            return Err(Error::SchemaVersion {
                found,
                supported: SCENARIO_SCHEMA_MAJOR,
            });
        }
    }
    let mut scenario: Scenario = serde_path_to_error::deserialize(value).map_err(|e| {
        Error::validation(e.path().to_string(), e.inner().to_string())
    })?;
    scenario.fill_defaults();
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario_file(path: &Path) -> Result<Scenario> {
    load_scenario(&std::fs::read_to_string(path)?)
}

impl Scenario {
    fn fill_defaults(&mut self) {
        let kind = self.model.kind;
        self.model
            .noise_gains
            .get_or_insert_with(|| vec![0.1; kind.noise_dim()]);
        self.costs
            .state_weight
            .get_or_insert_with(|| vec![0.0; kind.state_dim()]);
        self.costs
            .control_weight
            .get_or_insert_with(|| vec![1.0; kind.control_dim()]);
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind
    }

    pub fn horizon(&self) -> usize {
        self.model.horizon
    }

    pub fn position_dim(&self) -> usize {
        self.model.kind.position_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind();
        let (n_x, n_u, dim) = (kind.state_dim(), kind.control_dim(), kind.position_dim());
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(path, format!("must be positive, got {v}")))
            }
        };
        let nonneg = |path: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(path, format!("must be nonnegative, got {v}")))
            }
        };
        let range = |path: &str, r: [f64; 2], strict: bool| {
            let ok = r[0] <= r[1] && r[1].is_finite() && if strict { r[0] > 0.0 } else { r[0] >= 0.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::validation(path, format!("invalid range [{}, {}]", r[0], r[1])))
            }
        };

        positive("model.dt", self.model.dt)?;
        if self.model.horizon == 0 {
            return Err(Error::validation("model.horizon", "must be at least 1"));
        }
        let gains = self.model.noise_gains.as_deref().unwrap_or_default();
        if gains.len() != kind.noise_dim() {
            return Err(Error::validation(
                "model.noise_gains",
                format!("expected {} entries, found {}", kind.noise_dim(), gains.len()),
            ));
        }
        for (i, &g) in gains.iter().enumerate() {
            positive(&format!("model.noise_gains[{i}]"), g)?;
        }

        if self.sensing.landmarks.is_empty() {
            return Err(Error::validation("sensing.landmarks", "at least one landmark is required"));
        }
        for (i, l) in self.sensing.landmarks.iter().enumerate() {
            if l.len() != dim {
                return Err(Error::validation(
                    format!("sensing.landmarks[{i}]"),
                    format!("expected {dim} coordinates, found {}", l.len()),
                ));
            }
        }
        positive("sensing.eta_position", self.sensing.eta_position)?;
        positive("sensing.eta_velocity", self.sensing.eta_velocity)?;
        positive("sensing.eta", self.sensing.eta)?;
        positive("sensing.distance_floor", self.sensing.distance_floor)?;

        if self.world.lower.len() != dim || self.world.upper.len() != dim {
            return Err(Error::validation("world", format!("bounds must have {dim} coordinates")));
        }
        if self.world.lower.iter().zip(&self.world.upper).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::validation("world", "lower bound must be below upper bound"));
        }
        nonneg("robot_radius", self.robot_radius)?;
        for (i, ob) in self.obstacles.iter().enumerate() {
            let path = format!("obstacles[{i}]");
            match ob {
                Obstacle::Polygon { vertices } => {
                    if dim != 2 {
                        return Err(Error::validation(path, "polygons require a 2-D world"));
                    }
                    if vertices.len() < 3 {
                        return Err(Error::validation(path, "polygon needs at least 3 vertices"));
                    }
                    if vertices.iter().any(|v| !self.world.contains(v)) {
                        return Err(Error::validation(path, "polygon lies outside the world bounds"));
                    }
                }
                Obstacle::Sphere { center, radius } => {
                    if center.len() != dim {
                        return Err(Error::validation(path, format!("center must have {dim} coordinates")));
                    }
                    positive(&format!("{path}.radius"), *radius)?;
                    let inside = center
                        .iter()
                        .zip(self.world.lower.iter().zip(&self.world.upper))
                        .all(|(&c, (&lo, &hi))| c - radius >= lo && c + radius <= hi);
                    if !inside {
                        return Err(Error::validation(path, "sphere lies outside the world bounds"));
                    }
                }
            }
        }

        let s = &self.sampling;
        if kind == ModelKind::FixedWing && s.mode == NodeMode::Stationary {
            return Err(Error::validation(
                "sampling.mode",
                "the fixed-wing model has no equilibrium; use nonstationary",
            ));
        }
        if s.velocities_per_position == 0 {
            return Err(Error::validation("sampling.velocities_per_position", "must be at least 1"));
        }
        if s.fixed_positions.len() > s.positions {
            return Err(Error::validation(
                "sampling.fixed_positions",
                "more fixed positions than sampled positions",
            ));
        }
        for (i, p) in s.fixed_positions.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::validation(
                    format!("sampling.fixed_positions[{i}]"),
                    format!("expected {dim} coordinates"),
                ));
            }
        }
        range("sampling.speed_range", s.speed_range, false)?;
        if let Some(h) = &s.headings {
            if h.is_empty() || h.iter().any(|a| !a.is_finite()) {
                return Err(Error::validation("sampling.headings", "must be a non-empty list of angles"));
            }
        }
        for (name, r) in [("hat_eigenvalues", s.hat_eigenvalues), ("tilde_eigenvalues", s.tilde_eigenvalues)] {
            range(&format!("sampling.{name}.position"), r.position, true)?;
            range(&format!("sampling.{name}.motion"), r.motion, true)?;
        }
        if s.max_draws == 0 {
            return Err(Error::validation("sampling.max_draws", "must be at least 1"));
        }

        positive("roadmap.neighbor_radius", self.roadmap.neighbor_radius)?;
        nonneg("roadmap.admission_tol", self.roadmap.admission_tol)?;

        let c = &self.costs;
        nonneg("costs.w_mean", c.w_mean)?;
        nonneg("costs.w_cov", c.w_cov)?;
        nonneg("costs.w_collision", c.w_collision)?;
        let q = c.state_weight.as_deref().unwrap_or_default();
        if q.len() != n_x {
            return Err(Error::validation("costs.state_weight", format!("expected {n_x} entries")));
        }
        for (i, &v) in q.iter().enumerate() {
            nonneg(&format!("costs.state_weight[{i}]"), v)?;
        }
        let r = c.control_weight.as_deref().unwrap_or_default();
        if r.len() != n_u {
            return Err(Error::validation("costs.control_weight", format!("expected {n_u} entries")));
        }
        for (i, &v) in r.iter().enumerate() {
            positive(&format!("costs.control_weight[{i}]"), v)?;
        }

        if self.monte_carlo.samples == 0 {
            return Err(Error::validation("monte_carlo.samples", "must be at least 1"));
        }
        let t = self.monte_carlo.collision_threshold;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::validation("monte_carlo.collision_threshold", "must lie in [0, 1]"));
        }
        positive("cnt.tol", self.cnt.tol)?;
        if self.cnt.max_iter == 0 {
            return Err(Error::validation("cnt.max_iter", "must be at least 1"));
        }

        for (name, spec) in [("start", &self.start), ("goal", &self.goal)] {
            if spec.mean.len() != n_x {
                return Err(Error::validation(format!("{name}.mean"), format!("expected {n_x} entries")));
            }
            for (field, rows) in [("p_hat_prior", &spec.p_hat_prior), ("p_tilde_prior", &spec.p_tilde_prior)] {
                let path = format!("{name}.{field}");
                if rows.len() != n_x || rows.iter().any(|r| r.len() != n_x) {
                    return Err(Error::validation(path, format!("expected a {n_x}x{n_x} matrix")));
                }
                let m = rows_to_matrix(rows);
                if linalg::asymmetry(&m) > 1e-12 {
                    return Err(Error::validation(path, "matrix is not symmetric"));
                }
                if !linalg::is_psd(&m, linalg::PSD_TOL) {
                    return Err(Error::validation(path, "matrix is not positive semidefinite"));
                }
            }
            let p = &spec.mean[..dim];
            if !self.is_free(p)? {
                return Err(Error::validation(format!("{name}.mean"), "lies in collision or outside the world"));
            }
        }
        Ok(())
    }

    /// True iff `position` lies inside any (inflated) obstacle.
    pub fn collision(&self, position: &[f64]) -> Result<bool> {
        if position.len() != self.position_dim() {
            return Err(Error::dims("collision query", self.position_dim(), position.len()));
        }
        Ok(self.obstacles.iter().any(|o| o.contains(position, self.robot_radius)))
    }

    /// Inside the world bounds and outside every obstacle.
    pub fn is_free(&self, position: &[f64]) -> Result<bool> {
        Ok(self.world.contains(position) && !self.collision(position)?)
    }

    /// Free-space test for a full state.
    pub fn state_is_free(&self, x: &DVector<f64>) -> Result<bool> {
        self.is_free(&x.as_slice()[..self.position_dim()])
    }

    pub fn nonlinear_model(&self) -> Result<NonlinearModel> {
        NonlinearModel::new(
            self.kind(),
            self.model.dt,
            self.model.noise_gains.clone().unwrap_or_default(),
        )
    }

    pub fn sensor_model(&self) -> SensorModel {
        SensorModel {
            kind: self.kind(),
            landmarks: self
                .sensing
                .landmarks
                .iter()
                .map(|l| DVector::from_column_slice(l))
                .collect(),
            eta_position: self.sensing.eta_position,
            eta_velocity: self.sensing.eta_velocity,
            eta: self.sensing.eta,
            distance_floor: self.sensing.distance_floor,
        }
    }

    /// Per-edge tracking weights with a straight-line reference.
    pub fn edge_weights(&self, x0: &DVector<f64>, xn: &DVector<f64>) -> CostWeights {
        CostWeights::from_diagonals(
            self.horizon(),
            self.costs.state_weight.as_deref().unwrap_or_default(),
            self.costs.control_weight.as_deref().unwrap_or_default(),
            x0,
            xn,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact serialization of the effective scenario.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
