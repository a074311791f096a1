//! Belief roadmap: node sampling, edge construction through the admission
//! gates, Monte-Carlo collision costing, graph search and concatenation
//! checks along planned paths.

mod edge;
mod io;
mod search;
mod verify;

pub use edge::{monte_carlo_collision, EdgeContext, EdgeCosts, Gate, Rejection, RoadmapEdge};
pub use io::{load_roadmap, RoadmapDocument, ROADMAP_SCHEMA_VERSION};
pub use search::{dijkstra, shortest_path, PlannedPath};
pub use verify::{
    random_paths, simulate_path, verify_concatenation, ConcatenationReport, NodeArrival,
    PathRollouts,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::measurement_update;
use crate::linalg::{block_diag, serde_matrix, serde_vector, symmetrized};
use crate::rng::{self, Stream};
use crate::scenario::{EigenRanges, NodeMode, Scenario};
use crate::sysmodels::{ModelKind, SensorModel};

/// Gaussian belief node `(x̄, P̂₋, P̃₋)` with its a-posteriori covariances
/// after one measurement at the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefNode {
    pub id: usize,
    /// `(position index, motion index)`. Random streams are keyed by this
    /// rather than by `id`, so a node gets identical randomness in either
    /// sampling mode. Start and goal use positions 0 and 1.
    pub key: [u64; 2],
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub p_hat_prior: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_tilde_prior: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_hat: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub p_tilde: DMatrix<f64>,
}

impl BeliefNode {
    pub fn new(
        id: usize,
        key: [u64; 2],
        mean: DVector<f64>,
        p_hat_prior: DMatrix<f64>,
        p_tilde_prior: DMatrix<f64>,
        sensor: &SensorModel,
    ) -> Result<Self> {
        let (c, d) = sensor.linearize(&mean)?;
        let upd = measurement_update(&p_tilde_prior, &c, &d)?;
        let injection = &upd.gain * &upd.innovation * upd.gain.transpose();
        Ok(BeliefNode {
            id,
            key,
            p_hat: symmetrized(&p_hat_prior + injection),
            p_tilde: upd.posterior,
            mean,
            p_hat_prior,
            p_tilde_prior,
        })
    }

    /// `P = P̂₋ + P̃₋`.
    pub fn prior_covariance(&self) -> DMatrix<f64> {
        &self.p_hat_prior + &self.p_tilde_prior
    }

    /// `blkdiag(P̂, P̃)`, the joint covariance of `(x̌, e)` right after the
    /// node's measurement.
    pub fn posterior_joint(&self) -> DMatrix<f64> {
        block_diag(&[self.p_hat.clone(), self.p_tilde.clone()])
    }

    pub fn position(&self, dim: usize) -> &[f64] {
        &self.mean.as_slice()[..dim]
    }
}

/// Nodes per sampled position in the scenario's mode.
pub fn nodes_per_position(scenario: &Scenario) -> usize {
    match scenario.sampling.mode {
        NodeMode::Stationary => 1,
        NodeMode::Nonstationary => scenario.sampling.velocities_per_position,
    }
}

/// Start, goal and every sampled node.
pub fn node_count(scenario: &Scenario) -> usize {
    2 + scenario.sampling.positions * nodes_per_position(scenario)
}

/// `R diag(λ) Rᵀ` per block with `λ` uniform in the block's range and `R` a
/// Haar rotation; blocks are the position and the remaining coordinates.
pub fn sample_covariance<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &EigenRanges,
    position_dim: usize,
    n_x: usize,
) -> DMatrix<f64> {
    let mut block = |dim: usize, range: [f64; 2]| {
        let lambda = DVector::from_fn(dim, |_, _| {
            if range[0] < range[1] {
                rng.random_range(range[0]..=range[1])
            } else {
                range[0]
            }
        });
        let rot = random_rotation(rng, dim);
        symmetrized(&rot * DMatrix::from_diagonal(&lambda) * rot.transpose())
    };
    let a = block(position_dim, ranges.position);
    let b = block(n_x - position_dim, ranges.motion);
    block_diag(&[a, b])
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `diag(R)` folded into `Q`.
fn random_rotation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_column_slice(n, n, rng::standard_normal(rng, n * n).as_slice());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Start and goal followed by sampled nodes, `n` in total.
///
/// Each position draws its location and covariances from its own stream, and
/// each motion sample from another, so the stationary node set is a subset of
/// the nonstationary one for the same seed.
pub fn sample_nodes(scenario: &Scenario, n: usize, seed: u64) -> Result<Vec<BeliefNode>> {
    if n < 2 {
        return Err(Error::Precondition("a roadmap needs at least start and goal".into()));
    }
    let sensor = scenario.sensor_model();
    let kind = scenario.kind();
    let (dim, n_x) = (kind.position_dim(), kind.state_dim());
    let s = &scenario.sampling;
    let mut nodes = Vec::with_capacity(n);
    for (pos, spec) in [&scenario.start, &scenario.goal].into_iter().enumerate() {
        nodes.push(BeliefNode::new(
            pos,
            [pos as u64, 0],
            spec.mean_vector(),
            spec.p_hat_matrix(),
            spec.p_tilde_matrix(),
            &sensor,
        )?);
    }
    let per_position = nodes_per_position(scenario);
    let mut p = 0usize;
    while nodes.len() < n {
        let mut rng = rng::stream(seed, Stream::Sampling, &[p as u64]);
        let position = if let Some(fixed) = s.fixed_positions.get(p) {
            if !scenario.is_free(fixed)? {
                return Err(Error::validation(
                    format!("sampling.fixed_positions[{p}]"),
                    "position is in collision or outside the world",
                ));
            }
            fixed.clone()
        } else {
            sample_free_position(scenario, &mut rng)?
        };
        let p_hat_prior = sample_covariance(&mut rng, &s.hat_eigenvalues, dim, n_x);
        let p_tilde_prior = sample_covariance(&mut rng, &s.tilde_eigenvalues, dim, n_x);
        for m in 0..per_position {
            if nodes.len() == n {
                break;
            }
            let mut mrng = rng::stream(seed, Stream::Motion, &[p as u64, m as u64]);
            let motion = sample_motion(scenario, m, &mut mrng);
            let mut mean = DVector::zeros(n_x);
            mean.rows_mut(0, dim).copy_from_slice(&position);
            mean.rows_mut(dim, n_x - dim).copy_from_slice(&motion);
            nodes.push(BeliefNode::new(
                nodes.len(),
                [p as u64 + 2, m as u64],
                mean,
                p_hat_prior.clone(),
                p_tilde_prior.clone(),
                &sensor,
            )?);
        }
        p += 1;
    }
    Ok(nodes)
}

fn sample_free_position<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Vec<f64>> {
    let w = &scenario.world;
    for _ in 0..scenario.sampling.max_draws {
        let p: Vec<f64> = w
            .lower
            .iter()
            .zip(&w.upper)
            .map(|(&lo, &hi)| rng.random_range(lo..hi))
            .collect();
        if scenario.is_free(&p)? {
            return Ok(p);
        }
    }
    Err(Error::Precondition(format!(
        "free-space sampling exhausted after {} draws",
        scenario.sampling.max_draws
    )))
}

/// Velocity (double integrator) or heading (fixed wing) for motion sample `m`.
fn sample_motion<R: Rng + ?Sized>(scenario: &Scenario, m: usize, rng: &mut R) -> Vec<f64> {
    let s = &scenario.sampling;
    match scenario.kind() {
        ModelKind::DoubleIntegrator2D => {
            if s.mode == NodeMode::Stationary || (m == 0 && s.include_zero_motion) {
                return vec![0.0, 0.0];
            }
            let speed = if s.speed_range[0] < s.speed_range[1] {
                rng.random_range(s.speed_range[0]..=s.speed_range[1])
            } else {
                s.speed_range[0]
            };
            let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            vec![speed * angle.cos(), speed * angle.sin()]
        }
        ModelKind::FixedWing => match &s.headings {
            Some(h) => vec![h[m % h.len()]],
            None => vec![rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)],
        },
    }
}

/// Nodes whose mean position is within `d1` of `nodes[i]`, excluding `i`.
pub fn neighbor(nodes: &[BeliefNode], i: usize, d1: f64, position_dim: usize) -> Vec<usize> {
    let p = nodes[i].position(position_dim);
    nodes
        .iter()
        .enumerate()
        .filter(|&(j, node)| {
            j != i && {
                let q = node.position(position_dim);
                p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= d1
            }
        })
        .map(|(j, _)| j)
        .collect()
}

/// Outcome of one directed edge attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub from: usize,
    pub to: usize,
    /// `None` when the edge was accepted.
    pub rejected_at: Option<Gate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RoadmapGraph {
    pub scenario: Scenario,
    pub seed: u64,
    pub nodes: Vec<BeliefNode>,
    /// Accepted edges in attempt order.
    pub edges: Vec<RoadmapEdge>,
    /// Every attempted ordered pair, in attempt order.
    pub attempts: Vec<AttemptRecord>,
}

impl RoadmapGraph {
    /// Edge indices leaving each node.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[edge.from].push(e);
        }
        adj
    }

    pub fn find_edge(&self, from: usize, to: usize) -> Option<&RoadmapEdge> {
        self.edges.iter().find(|e| e.from == from && e.to == to)
    }

    pub fn rejection_counts(&self) -> Vec<(Gate, usize)> {
        Gate::ALL
            .iter()
            .map(|&g| {
                let count = self.attempts.iter().filter(|a| a.rejected_at == Some(g)).count();
                (g, count)
            })
            .collect()
    }
}

/// Ordered pairs to attempt: every node against each of its neighbors, so
/// each direction of each neighbor pair is tried exactly once.
pub fn attempt_pairs(nodes: &[BeliefNode], d1: f64, position_dim: usize) -> Vec<(usize, usize)> {
    (0..nodes.len())
        .flat_map(|i| {
            neighbor(nodes, i, d1, position_dim)
                .into_iter()
                .map(move |j| (i, j))
        })
        .collect()
}

/// Sample nodes and attempt every neighbor edge. Edge attempts run on the
/// ambient rayon pool; results are collected in attempt order.
pub fn build_roadmap(scenario: &Scenario, seed: u64) -> Result<RoadmapGraph> {
    let nodes = sample_nodes(scenario, node_count(scenario), seed)?;
    build_roadmap_on(scenario, seed, nodes)
}

/// Edge construction over a given node set.
pub fn build_roadmap_on(scenario: &Scenario, seed: u64, nodes: Vec<BeliefNode>) -> Result<RoadmapGraph> {
    let ctx = EdgeContext::new(scenario, seed)?;
    let pairs = attempt_pairs(&nodes, scenario.roadmap.neighbor_radius, scenario.position_dim());
    let outcomes: Vec<_> = pairs
        .par_iter()
        .map(|&(i, j)| ctx.build_edge(&nodes[i], &nodes[j]))
        .collect();
    let mut edges = Vec::new();
    let mut attempts = Vec::with_capacity(pairs.len());
    for ((from, to), outcome) in pairs.into_iter().zip(outcomes) {
        match outcome {
            Ok(edge) => {
                attempts.push(AttemptRecord {
                    from,
                    to,
                    rejected_at: None,
                    detail: None,
                });
                edges.push(edge);
            }
            Err(r) => attempts.push(AttemptRecord {
                from,
                to,
                rejected_at: Some(r.gate()),
                detail: Some(r.to_string()),
            }),
        }
    }
    Ok(RoadmapGraph {
        scenario: scenario.clone(),
        seed,
        nodes,
        edges,
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::scenario::load_scenario;

    fn scenario(mode: &str) -> Scenario {
        load_scenario(&format!(
            r#"{{
            "model": {{"kind": "double_integrator"}},
            "sensing": {{"landmarks": [[5.0, 5.0]]}},
            "world": {{"lower": [0.0, 0.0], "upper": [10.0, 10.0]}},
            "obstacles": [{{"type": "polygon", "vertices": [[4, 4], [6, 4], [6, 6], [4, 6]]}}],
            "sampling": {{"positions": 6, "mode": "{mode}",
                          "hat_eigenvalues": {{"position": [0.02, 0.2], "motion": [0.05, 0.1]}}}},
            "roadmap": {{"neighbor_radius": 4.0}},
            "start": {{"mean": [1, 1, 0, 0],
                      "p_hat_prior": [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.1,0],[0,0,0,0.1]],
                      "p_tilde_prior": [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.1,0],[0,0,0,0.1]]}},
            "goal": {{"mean": [9, 9, 0, 0],
                      "p_hat_prior": [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.1,0],[0,0,0,0.1]],
                      "p_tilde_prior": [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.1,0],[0,0,0,0.1]]}}
        }}"#
        ))
        .unwrap()
    }

    #[test]
    fn stationary_nodes_have_zero_velocity() {
        let s = scenario("stationary");
        let nodes = sample_nodes(&s, node_count(&s), 11).unwrap();
        assert_eq!(nodes.len(), 8);
        for n in &nodes[2..] {
            assert_eq!(n.mean[2], 0.0);
            assert_eq!(n.mean[3], 0.0);
            assert!(s.is_free(n.position(2)).unwrap());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_modes_nest() {
        let st = scenario("stationary");
        let ns = scenario("nonstationary");
        let a = sample_nodes(&ns, node_count(&ns), 5).unwrap();
        let b = sample_nodes(&ns, node_count(&ns), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 + 6 * 3);
        let s = sample_nodes(&st, node_count(&st), 5).unwrap();
        for node in &s {
            let twin = a.iter().find(|n| n.key == node.key).expect("same key in both modes");
            assert_eq!(twin.mean, node.mean);
            assert_eq!(twin.p_hat_prior, node.p_hat_prior);
            assert_eq!(twin.p_tilde_prior, node.p_tilde_prior);
        }
        assert!(a.iter().any(|n| n.mean[2] != 0.0));
    }

    #[test]
    fn sampled_eigenvalues_stay_in_range() {
        let ranges = EigenRanges {
            position: [0.02, 0.2],
            motion: [0.05, 0.1],
        };
        let mut rng = rng::stream(1, Stream::Sampling, &[0]);
        for _ in 0..200 {
            let p = sample_covariance(&mut rng, &ranges, 2, 4);
            for (blk, r) in [(p.view((0, 0), (2, 2)), ranges.position), (p.view((2, 2), (2, 2)), ranges.motion)] {
                let eig = blk.into_owned().symmetric_eigen().eigenvalues;
                for &l in eig.iter() {
                    assert!(l >= r[0] - 1e-12 && l <= r[1] + 1e-12, "{l} not in {r:?}");
                }
            }
            assert_eq!(p.view((0, 2), (2, 2)).amax(), 0.0);
        }
    }

    #[test]
    fn node_posterior_is_below_prior() {
        let s = scenario("nonstationary");
        for n in sample_nodes(&s, node_count(&s), 2).unwrap() {
            assert!(min_eigenvalue(&(&n.p_tilde_prior - &n.p_tilde)) >= -1e-12);
            assert!(min_eigenvalue(&(&n.p_hat - &n.p_hat_prior)) >= -1e-12);
            // Information balance: P̂ + P̃ = P̂₋ + P̃₋.
            assert!((&n.p_hat + &n.p_tilde - n.prior_covariance()).amax() < 1e-12);
        }
    }

    #[test]
    fn neighbor_queries() {
        let s = scenario("stationary");
        let sensor = s.sensor_model();
        let eye = DMatrix::identity(4, 4) * 0.1;
        let nodes: Vec<_> = (0..3)
            .map(|i| {
                let mean = DVector::from_vec(vec![i as f64, 0.0, 0.0, 0.0]);
                BeliefNode::new(i, [i as u64, 0], mean, eye.clone(), eye.clone(), &sensor).unwrap()
            })
            .collect();
        assert_eq!(neighbor(&nodes, 1, 1.5, 2), vec![0, 2]);
        assert!(neighbor(&nodes, 1, 0.5, 2).is_empty());
        assert_eq!(neighbor(&nodes, 0, f64::INFINITY, 2), vec![1, 2]);
    }

    #[test]
    fn each_ordered_pair_attempted_once() {
        let s = scenario("nonstationary");
        let nodes = sample_nodes(&s, node_count(&s), 4).unwrap();
        let pairs = attempt_pairs(&nodes, 4.0, 2);
        let expected: usize = (0..nodes.len()).map(|i| neighbor(&nodes, i, 4.0, 2).len()).sum();
        assert_eq!(pairs.len(), expected);
        let mut sorted = pairs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), pairs.len());
        for &(i, j) in &pairs {
            assert!(pairs.contains(&(j, i)));
        }
    }
}
