//! Run results and plotting inputs. Covariances go out row-major together
//! with precomputed 3σ ellipse (or ellipsoid) axes of their position block.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{symmetrized, MatrixRecord};
use crate::roadmap::{ConcatenationReport, EdgeCosts, PathRollouts, PlannedPath, RoadmapGraph};
use crate::scenario::{NodeMode, Obstacle, WorldBounds};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// 3σ confidence region of a position covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    #[serde(with = "crate::linalg::serde_vector")]
    pub center: DVector<f64>,
    /// `3√λ`, largest first.
    pub semi_axes: Vec<f64>,
    /// Unit axis directions matching `semi_axes`.
    pub axes: Vec<Vec<f64>>,
    /// In 2-D, angle of the major axis in `(−π/2, π/2]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
}

impl Ellipse {
    pub fn from_covariance(center: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let cov = symmetrized(cov.clone());
        let dim = cov.nrows();
        if dim == 2 {
            // Closed form keeps the angle well defined for isotropic input.
            let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
            let mid = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let mut angle = 0.5 * (2.0 * b).atan2(a - c);
            if angle <= -std::f64::consts::FRAC_PI_2 {
                angle += std::f64::consts::PI;
            }
            let (s, co) = angle.sin_cos();
            return Ellipse {
                center,
                semi_axes: vec![3.0 * (mid + rad).max(0.0).sqrt(), 3.0 * (mid - rad).max(0.0).sqrt()],
                axes: vec![vec![co, s], vec![-s, co]],
                angle: Some(angle),
            };
        }
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        Ellipse {
            center,
            semi_axes: order
                .iter()
                .map(|&i| 3.0 * eig.eigenvalues[i].max(0.0).sqrt())
                .collect(),
            axes: order
                .iter()
                .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
                .collect(),
            angle: None,
        }
    }
}

fn position_block(m: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    m.view((0, 0), (dim, dim)).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadmapReference {
    pub file: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub mode: NodeMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Found,
    NoPath,
}

/// Predicted belief at one step of an edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedStep {
    pub k: usize,
    pub mean: Vec<f64>,
    /// `P_k = P̂_k + P̃_k`.
    pub covariance: MatrixRecord,
    pub p_hat: MatrixRecord,
    pub p_tilde: MatrixRecord,
    pub ellipse: Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEdge {
    pub edge: usize,
    pub from: usize,
    pub to: usize,
    pub costs: EdgeCosts,
    pub cnt_iterations: usize,
    pub steps: Vec<PredictedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub nodes: Vec<usize>,
    pub total_cost: f64,
    pub mean_cost: f64,
    pub cov_cost: f64,
    pub collision_probability_sum: f64,
    pub weighted_collision_cost: f64,
    pub edges: Vec<PathEdge>,
}

impl PathSummary {
    pub fn new(graph: &RoadmapGraph, path: &PlannedPath) -> Self {
        let dim = graph.scenario.position_dim();
        let w = &graph.scenario.costs;
        let mut s = PathSummary {
            nodes: path.nodes.clone(),
            total_cost: path.total_cost,
            mean_cost: 0.0,
            cov_cost: 0.0,
            collision_probability_sum: 0.0,
            weighted_collision_cost: 0.0,
            edges: Vec::with_capacity(path.edges.len()),
        };
        for &e in &path.edges {
            let edge = &graph.edges[e];
            s.mean_cost += edge.costs.mean;
            s.cov_cost += edge.costs.cov;
            s.collision_probability_sum += edge.costs.collision_probability;
            let m = &edge.controller.moments;
            let steps = (0..m.mean.len())
                .map(|k| PredictedStep {
                    k,
                    mean: m.mean[k].as_slice().to_vec(),
                    covariance: (&m.p_total[k]).into(),
                    p_hat: (&m.p_hat[k]).into(),
                    p_tilde: (&m.p_tilde[k]).into(),
                    ellipse: Ellipse::from_covariance(
                        m.mean[k].rows(0, dim).into_owned(),
                        &position_block(&m.p_total[k], dim),
                    ),
                })
                .collect();
            s.edges.push(PathEdge {
                edge: e,
                from: edge.from,
                to: edge.to,
                costs: edge.costs,
                cnt_iterations: edge.cnt_residuals.len(),
                steps,
            });
        }
        s.weighted_collision_cost = w.w_collision * s.collision_probability_sum;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub collided: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Subsampled true positions.
    pub positions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBundle {
    pub count: usize,
    pub seed: u64,
    pub collisions: usize,
    pub collision_rate: f64,
    pub collision_threshold: f64,
    /// Every `stride`-th state of the first `traces.len()` rollouts.
    pub stride: usize,
    pub traces: Vec<RolloutTrace>,
}

impl RolloutBundle {
    pub fn new(rollouts: &PathRollouts, seed: u64, threshold: f64, dim: usize, max_traces: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let traces = rollouts
            .runs
            .iter()
            .take(max_traces)
            .map(|r| {
                let n = r.states.len();
                let positions = (0..n)
                    .filter(|&k| k % stride == 0 || k + 1 == n)
                    .map(|k| r.states[k].as_slice()[..dim].to_vec())
                    .collect();
                RolloutTrace {
                    collided: r.collided,
                    failure: r.failure.clone(),
                    positions,
                }
            })
            .collect();
        RolloutBundle {
            count: rollouts.runs.len(),
            seed,
            collisions: rollouts.runs.iter().filter(|r| r.collided).count(),
            collision_rate: rollouts.collision_rate(),
            collision_threshold: threshold,
            stride,
            traces,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub start: usize,
    pub goal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub format: String,
    pub schema_version: u32,
    pub roadmap: RoadmapReference,
    pub query: Query,
    pub status: PlanStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollouts: Option<RolloutBundle>,
}

impl RunResult {
    pub fn new(graph: &RoadmapGraph, file: &str, start: usize, goal: usize, path: Option<&PlannedPath>) -> Result<Self> {
        Ok(RunResult {
            format: "belief-roadmap-result".into(),
            schema_version: RESULT_SCHEMA_VERSION,
            roadmap: RoadmapReference {
                file: file.into(),
                scenario_hash: graph.scenario.content_hash()?,
                seed: graph.seed,
                mode: graph.scenario.sampling.mode,
            },
            query: Query { start, goal },
            status: if path.is_some() { PlanStatus::Found } else { PlanStatus::NoPath },
            path: path.map(|p| PathSummary::new(graph, p)),
            rollouts: None,
        })
    }

    /// The planned path as graph indices, if any.
    pub fn planned_path(&self) -> Option<PlannedPath> {
        self.path.as_ref().map(|p| PlannedPath {
            nodes: p.nodes.clone(),
            edges: p.edges.iter().map(|e| e.edge).collect(),
            total_cost: p.total_cost,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub format: String,
    pub schema_version: u32,
    pub scenario_hash: String,
    pub paths: usize,
    pub worst_margin: f64,
    pub tolerance: f64,
    pub holds: bool,
    pub reports: Vec<ConcatenationReport>,
}

impl VerificationSummary {
    pub fn new(scenario_hash: String, reports: Vec<ConcatenationReport>) -> Self {
        let worst = reports
            .iter()
            .map(ConcatenationReport::worst_margin)
            .fold(f64::INFINITY, f64::min);
        VerificationSummary {
            format: "belief-roadmap-verification".into(),
            schema_version: RESULT_SCHEMA_VERSION,
            scenario_hash,
            paths: reports.len(),
            worst_margin: worst,
            tolerance: ConcatenationReport::TOLERANCE,
            holds: reports.iter().all(ConcatenationReport::holds),
            reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureNode {
    pub id: usize,
    pub position: Vec<f64>,
    /// 3σ region of the prior state covariance `P̂₋ + P̃₋`.
    pub ellipse: Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureEdge {
    pub from: usize,
    pub to: usize,
    pub mean_positions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CntCurve {
    pub from: usize,
    pub to: usize,
    pub on_path: bool,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigurePath {
    pub nodes: Vec<usize>,
    pub mean_positions: Vec<Vec<f64>>,
    pub ellipses: Vec<Ellipse>,
    pub total_cost: f64,
    pub mean_cost: f64,
    pub cov_cost: f64,
    pub collision_probability_sum: f64,
}

/// Everything the plotting scripts draw: roadmap graphs, planned path with
/// ellipses, rollout fans and CNT residual curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiguresData {
    pub format: String,
    pub schema_version: u32,
    pub scenario: String,
    pub dimension: usize,
    pub mode: NodeMode,
    pub world: WorldBounds,
    pub obstacles: Vec<Obstacle>,
    pub landmarks: Vec<Vec<f64>>,
    pub start: usize,
    pub goal: usize,
    pub nodes: Vec<FigureNode>,
    pub edges: Vec<FigureEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<FigurePath>,
    pub rollouts: Vec<RolloutTrace>,
    pub cnt: Vec<CntCurve>,
}

impl FiguresData {
    pub fn new(graph: &RoadmapGraph, result: &RunResult) -> Self {
        let sc = &graph.scenario;
        let dim = sc.position_dim();
        let on_path: Vec<usize> = result
            .path
            .as_ref()
            .map(|p| p.edges.iter().map(|e| e.edge).collect())
            .unwrap_or_default();
        let pos = |v: &DVector<f64>| v.as_slice()[..dim].to_vec();
        FiguresData {
            format: "belief-roadmap-figures".into(),
            schema_version: RESULT_SCHEMA_VERSION,
            scenario: sc.name.clone(),
            dimension: dim,
            mode: sc.sampling.mode,
            world: sc.world.clone(),
            obstacles: sc.obstacles.clone(),
            landmarks: sc.sensing.landmarks.clone(),
            start: result.query.start,
            goal: result.query.goal,
            nodes: graph
                .nodes
                .iter()
                .map(|n| FigureNode {
                    id: n.id,
                    position: pos(&n.mean),
                    ellipse: Ellipse::from_covariance(
                        n.mean.rows(0, dim).into_owned(),
                        &position_block(&n.prior_covariance(), dim),
                    ),
                })
                .collect(),
            edges: graph
                .edges
                .iter()
                .map(|e| FigureEdge {
                    from: e.from,
                    to: e.to,
                    mean_positions: e.controller.mean_states.iter().map(pos).collect(),
                })
                .collect(),
            path: result.path.as_ref().map(|p| {
                let steps: Vec<&PredictedStep> = p
                    .edges
                    .iter()
                    .enumerate()
                    .flat_map(|(leg, e)| e.steps.iter().skip(usize::from(leg > 0)))
                    .collect();
                FigurePath {
                    nodes: p.nodes.clone(),
                    mean_positions: steps.iter().map(|s| s.mean[..dim].to_vec()).collect(),
                    ellipses: steps.iter().map(|s| s.ellipse.clone()).collect(),
                    total_cost: p.total_cost,
                    mean_cost: p.mean_cost,
                    cov_cost: p.cov_cost,
                    collision_probability_sum: p.collision_probability_sum,
                }
            }),
            rollouts: result
                .rollouts
                .as_ref()
                .map(|r| r.traces.clone())
                .unwrap_or_default(),
            cnt: graph
                .edges
                .iter()
                .enumerate()
                .map(|(i, e)| CntCurve {
                    from: e.from,
                    to: e.to,
                    on_path: on_path.contains(&i),
                    residuals: e.cnt_residuals.clone(),
                })
                .collect(),
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
        .map_err(|e| crate::error::Error::validation(e.path().to_string(), e.inner().to_string()))
}
