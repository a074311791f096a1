use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnt::wrap_angle;
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, psd_margin};
use crate::rng::{self, Stream};
use crate::steering::{propagate_joint, simulate_from, SimulationNoise};
use crate::sysmodels::ModelKind;

use super::{EdgeContext, PlannedPath, RoadmapGraph};

/// Covariances on arrival at one node of a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeArrival {
    pub node: usize,
    /// Position of the arriving edge along the path.
    pub leg: usize,
    /// `λ_min(P̂_node − P̂_arrived)` from exact moment propagation.
    pub hat_margin: f64,
    /// `λ_min(P̃_node − P̃_arrived)`.
    pub tilde_margin: f64,
    /// `λ_min(blkdiag(P̂, P̃)_node − Cov(x̌, e)_arrived)`, the joint condition
    /// the next edge relies on.
    pub joint_margin: f64,
    /// Same margins from sample covariances of simulated rollouts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_hat_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empirical_tilde_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatenationReport {
    pub nodes: Vec<usize>,
    pub arrivals: Vec<NodeArrival>,
    pub tolerance: f64,
}

impl ConcatenationReport {
    pub const TOLERANCE: f64 = 1e-6;

    /// Smallest analytic margin over every arrival.
    pub fn worst_margin(&self) -> f64 {
        self.arrivals
            .iter()
            .flat_map(|a| [a.hat_margin, a.tilde_margin])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn holds(&self) -> bool {
        self.worst_margin() >= -self.tolerance
    }
}

fn check_path(graph: &RoadmapGraph, path: &PlannedPath) -> Result<()> {
    if path.edges.is_empty() {
        return Err(Error::Precondition("path has no edges".into()));
    }
    for (leg, &e) in path.edges.iter().enumerate() {
        let edge = graph
            .edges
            .get(e)
            .ok_or_else(|| Error::Precondition(format!("edge index {e} not in graph")))?;
        if edge.from != path.nodes[leg] || edge.to != path.nodes[leg + 1] {
            return Err(Error::Precondition(format!("leg {leg} does not match the node sequence")));
        }
    }
    Ok(())
}

/// Execute the stored edge controllers back to back and compare the actual
/// arrival covariances with each node's.
///
/// The first edge starts from the source node's prior belief; every later
/// edge is entered with the previous edge's arrival joint covariance of
/// `(x̌, e)` and skips its step-0 update, since the node's measurement was the
/// previous edge's last. With `rollouts > 0` the path is also simulated
/// through the nonlinear model and sample margins are reported alongside.
pub fn verify_concatenation(
    ctx: &EdgeContext<'_>,
    graph: &RoadmapGraph,
    path: &PlannedPath,
    rollouts: usize,
    seed: u64,
) -> Result<ConcatenationReport> {
    check_path(graph, path)?;
    let start = &graph.nodes[path.nodes[0]];
    let mut joint = DMatrix::zeros(0, 0);
    let mut arrivals = Vec::with_capacity(path.edges.len());
    for (leg, &e) in path.edges.iter().enumerate() {
        let edge = &graph.edges[e];
        let (joint0, update_first) = if leg == 0 {
            (
                crate::linalg::block_diag(&[start.p_hat_prior.clone(), start.p_tilde_prior.clone()]),
                true,
            )
        } else {
            (joint.clone(), false)
        };
        let prop = propagate_joint(
            &edge.system,
            &edge.controller.filter.gains,
            &edge.controller.feedback,
            &joint0,
            update_first,
        )?;
        let n = edge.controller.horizon();
        let node = &graph.nodes[edge.to];
        joint = prop.joint(n);
        arrivals.push(NodeArrival {
            node: edge.to,
            leg,
            hat_margin: psd_margin(&prop.hat[n], &node.p_hat),
            tilde_margin: psd_margin(&prop.tilde[n], &node.p_tilde),
            joint_margin: psd_margin(&joint, &node.posterior_joint()),
            empirical_hat_margin: None,
            empirical_tilde_margin: None,
        });
    }

    if rollouts > 1 {
        let sims = simulate_path(ctx, graph, path, rollouts, seed)?;
        for (leg, arrival) in arrivals.iter_mut().enumerate() {
            let edge = &graph.edges[path.edges[leg]];
            let node = &graph.nodes[edge.to];
            let samples: Vec<_> = sims.runs.iter().filter_map(|r| r.arrivals.get(leg)).collect();
            if samples.len() < 2 {
                continue;
            }
            let target = edge.controller.mean_states.last().expect("non-empty");
            let hats: Vec<DVector<f64>> = samples.iter().map(|(_, xh)| xh - target).collect();
            let errs: Vec<DVector<f64>> = samples.iter().map(|(x, xh)| x - xh).collect();
            arrival.empirical_hat_margin = Some(psd_margin(&sample_covariance(&hats), &node.p_hat));
            arrival.empirical_tilde_margin = Some(psd_margin(&sample_covariance(&errs), &node.p_tilde));
        }
    }
    Ok(ConcatenationReport {
        nodes: path.nodes.clone(),
        arrivals,
        tolerance: ConcatenationReport::TOLERANCE,
    })
}

/// Unbiased sample covariance.
pub(crate) fn sample_covariance(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let n = xs[0].len();
    let m = xs.len() as f64;
    let mean = xs.iter().fold(DVector::zeros(n), |acc, x| acc + x) / m;
    let mut cov = DMatrix::zeros(n, n);
    for x in xs {
        let d = x - &mean;
        cov += &d * d.transpose();
    }
    cov / (m - 1.0)
}

/// One end-to-end execution of a path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRun {
    pub states: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    /// `(x_N, x̂_N)` at the end of each completed leg.
    pub arrivals: Vec<(DVector<f64>, DVector<f64>)>,
    pub collided: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRollouts {
    pub runs: Vec<PathRun>,
}

impl PathRollouts {
    pub fn collision_rate(&self) -> f64 {
        let hits = self.runs.iter().filter(|r| r.collided).count();
        hits as f64 / self.runs.len().max(1) as f64
    }
}

/// `m` closed-loop executions of a path through the nonlinear model, each on
/// its own random stream. A run collides if any true state leaves free space
/// or the model rejects a step; it stops at that point.
pub fn simulate_path(
    ctx: &EdgeContext<'_>,
    graph: &RoadmapGraph,
    path: &PlannedPath,
    m: usize,
    seed: u64,
) -> Result<PathRollouts> {
    check_path(graph, path)?;
    let runs = (0..m)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, Stream::Simulate, &[r as u64]);
            run_path(ctx, graph, path, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathRollouts { runs })
}

fn run_path<R: Rng + ?Sized>(
    ctx: &EdgeContext<'_>,
    graph: &RoadmapGraph,
    path: &PlannedPath,
    rng: &mut R,
) -> Result<PathRun> {
    let start = &graph.nodes[path.nodes[0]];
    let zero = DVector::zeros(start.mean.len());
    let mut x_hat = rng::gaussian(rng, &start.mean, &psd_factor(&start.p_hat_prior));
    let mut x = &x_hat + rng::gaussian(rng, &zero, &psd_factor(&start.p_tilde_prior));
    let mut run = PathRun {
        states: vec![x.clone()],
        estimates: vec![x_hat.clone()],
        arrivals: Vec::new(),
        collided: !ctx.scenario.state_is_free(&x)?,
        failure: None,
    };
    for (leg, &e) in path.edges.iter().enumerate() {
        if run.collided {
            break;
        }
        let edge = &graph.edges[e];
        if ctx.scenario.kind() == ModelKind::FixedWing {
            // Arrival headings may sit on another 2π branch than the node mean.
            let m0 = edge.controller.mean_states[0][3];
            let shift = x_hat[3] - (m0 + wrap_angle(x_hat[3] - m0));
            x_hat[3] -= shift;
            x[3] -= shift;
        }
        let r = simulate_from(
            &edge.controller,
            &edge.system,
            &ctx.model,
            &ctx.sensor,
            &x,
            &x_hat,
            leg == 0,
            rng,
            SimulationNoise::default(),
        )?;
        // With the step-0 update the first estimate differs from the sample.
        if leg == 0 {
            run.estimates[0] = r.estimates[0].clone();
        }
        for (s, xh) in r.states.iter().zip(&r.estimates).skip(1) {
            run.states.push(s.clone());
            run.estimates.push(xh.clone());
            if !ctx.scenario.state_is_free(s)? {
                run.collided = true;
                break;
            }
        }
        if let Some(f) = r.failure {
            run.failure = Some(f);
            run.collided = true;
        }
        if run.collided {
            break;
        }
        x = r.states.last().expect("non-empty").clone();
        x_hat = r.estimates.last().expect("non-empty").clone();
        run.arrivals.push((x.clone(), x_hat.clone()));
    }
    Ok(run)
}

/// `count` random walks of exactly `legs` edges, each drawn from its own
/// stream. Walks that hit a dead end are redrawn.
pub fn random_paths(graph: &RoadmapGraph, count: usize, legs: usize, seed: u64) -> Result<Vec<PlannedPath>> {
    let adj = graph.adjacency();
    let starts: Vec<usize> = (0..graph.nodes.len()).filter(|&i| !adj[i].is_empty()).collect();
    if starts.is_empty() || legs == 0 {
        return Err(Error::Precondition("graph has no edges to walk".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut draw = 0u64;
    while out.len() < count {
        if draw > 1000 * count as u64 + 1000 {
            return Err(Error::Precondition(format!("no walk of {legs} edges found")));
        }
        let mut rng = rng::stream(seed, Stream::Verify, &[draw]);
        draw += 1;
        let mut node = starts[rng.random_range(0..starts.len())];
        let mut path = PlannedPath {
            nodes: vec![node],
            edges: Vec::new(),
            total_cost: 0.0,
        };
        while path.edges.len() < legs && !adj[node].is_empty() {
            let e = adj[node][rng.random_range(0..adj[node].len())];
            node = graph.edges[e].to;
            path.edges.push(e);
            path.nodes.push(node);
            path.total_cost += graph.edges[e].costs.total;
        }
        if path.edges.len() == legs {
            out.push(path);
        }
    }
    Ok(out)
}
