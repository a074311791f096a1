//! Versioned roadmap document. Edges store their nominal trajectory, mean
//! controls and nonzero gain blocks; linearization, filter and predicted
//! moments are recomputed on load from the same inputs, so a reloaded graph
//! is numerically identical to the one that was written.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::kf_rollout;
use crate::linalg::{serde_matrix, serde_vector, MatrixRecord};
use crate::scenario::Scenario;
use crate::steering::{assemble, closed_loop_moments, EdgeController};
use crate::sysmodels::{linearize, NominalTrajectory};

use super::{AttemptRecord, BeliefNode, EdgeCosts, RoadmapEdge, RoadmapGraph};

pub const ROADMAP_SCHEMA_VERSION: u32 = 1;
const FORMAT: &str = "belief-roadmap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadmapDocument {
    pub format: String,
    pub schema_version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub nodes: Vec<BeliefNode>,
    pub edges: Vec<EdgeRecord>,
    pub attempts: Vec<AttemptRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainBlock {
    pub k: usize,
    pub i: usize,
    #[serde(with = "serde_matrix")]
    pub gain: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub from: usize,
    pub to: usize,
    pub costs: EdgeCosts,
    pub cnt_residuals: Vec<f64>,
    pub nominal: NominalTrajectory,
    #[serde(with = "serde_vector::vec")]
    pub mean_states: Vec<DVector<f64>>,
    #[serde(with = "serde_vector::vec")]
    pub mean_controls: Vec<DVector<f64>>,
    /// Nonzero blocks `K_{k,i}` of the causal feedback.
    pub gains: Vec<GainBlock>,
    /// Predicted `P̂_N` and `P̃_N`, for inspection.
    pub terminal_p_hat: MatrixRecord,
    pub terminal_p_tilde: MatrixRecord,
}

impl EdgeRecord {
    fn from_edge(edge: &RoadmapEdge) -> Self {
        let c = &edge.controller;
        let mut gains = Vec::new();
        for k in 0..c.horizon() {
            for i in 0..=k {
                let gain = c.gain_block(k, i);
                if gain.amax() != 0.0 {
                    gains.push(GainBlock { k, i, gain });
                }
            }
        }
        EdgeRecord {
            from: edge.from,
            to: edge.to,
            costs: edge.costs,
            cnt_residuals: edge.cnt_residuals.clone(),
            nominal: edge.nominal.clone(),
            mean_states: c.mean_states.clone(),
            mean_controls: c.mean_controls.clone(),
            gains,
            terminal_p_hat: c.moments.terminal_hat().into(),
            terminal_p_tilde: c.filter.posterior.last().expect("non-empty").into(),
        }
    }
}

impl RoadmapDocument {
    pub fn from_graph(graph: &RoadmapGraph) -> Result<Self> {
        Ok(RoadmapDocument {
            format: FORMAT.into(),
            schema_version: ROADMAP_SCHEMA_VERSION,
            scenario_hash: graph.scenario.content_hash()?,
            seed: graph.seed,
            scenario: graph.scenario.clone(),
            nodes: graph.nodes.clone(),
            edges: graph.edges.iter().map(EdgeRecord::from_edge).collect(),
            attempts: graph.attempts.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Rebuild the in-memory graph.
    pub fn into_graph(self) -> Result<RoadmapGraph> {
        if self.format != FORMAT {
            return Err(Error::validation("format", format!("expected `{FORMAT}`")));
        }
        if self.schema_version != ROADMAP_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version.to_string(),
                supported: ROADMAP_SCHEMA_VERSION,
            });
        }
        self.scenario.validate()?;
        if self.scenario.content_hash()? != self.scenario_hash {
            return Err(Error::validation("scenario_hash", "does not match the embedded scenario"));
        }
        let model = self.scenario.nonlinear_model()?;
        let sensor = self.scenario.sensor_model();
        let mut edges = Vec::with_capacity(self.edges.len());
        for (idx, rec) in self.edges.into_iter().enumerate() {
            let path = format!("edges[{idx}]");
            let from = self
                .nodes
                .get(rec.from)
                .ok_or_else(|| Error::validation(&path, "unknown source node"))?;
            if rec.to >= self.nodes.len() {
                return Err(Error::validation(&path, "unknown destination node"));
            }
            rec.nominal.validate(&model)?;
            let system = linearize(&model, &sensor, &rec.nominal)?;
            let n = system.horizon();
            let (n_x, n_u) = (system.n_x(), system.n_u());
            if rec.mean_states.len() != n + 1 || rec.mean_controls.len() != n {
                return Err(Error::validation(&path, "mean trajectory length mismatch"));
            }
            let mut feedback = DMatrix::zeros(n * n_u, (n + 1) * n_x);
            for b in &rec.gains {
                if b.i > b.k || b.k >= n || b.gain.shape() != (n_u, n_x) {
                    return Err(Error::validation(&path, format!("bad gain block ({}, {})", b.k, b.i)));
                }
                feedback
                    .view_mut((b.k * n_u, b.i * n_x), (n_u, n_x))
                    .copy_from(&b.gain);
            }
            let filter = kf_rollout(&system, &from.p_tilde_prior)?;
            let stacked = assemble(&system, &filter)?;
            let moments = closed_loop_moments(&stacked, &rec.mean_states, &feedback, &from.p_hat_prior)?;
            edges.push(RoadmapEdge {
                from: rec.from,
                to: rec.to,
                nominal: rec.nominal,
                cnt_residuals: rec.cnt_residuals,
                system,
                controller: EdgeController {
                    mean_controls: rec.mean_controls,
                    mean_states: rec.mean_states,
                    feedback,
                    filter,
                    moments,
                    mean_cost: rec.costs.mean,
                    cov_cost: rec.costs.cov,
                },
                costs: rec.costs,
            });
        }
        Ok(RoadmapGraph {
            scenario: self.scenario,
            seed: self.seed,
            nodes: self.nodes,
            edges,
            attempts: self.attempts,
        })
    }
}

pub fn load_roadmap(path: &Path) -> Result<RoadmapGraph> {
    let text = std::fs::read_to_string(path)?;
    let doc: RoadmapDocument = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
        .map_err(|e| Error::validation(e.path().to_string(), e.inner().to_string()))?;
    doc.into_graph()
}
