use std::fmt;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cnt::{compute_cnt, straight_line_guess, unwrap_target};
use crate::error::Result;
use crate::estimation::kf_rollout;
use crate::linalg::{psd_factor, psd_margin};
use crate::rng::{self, Stream};
use crate::scenario::{CostConfig, Scenario};
use crate::steering::{assemble, finish_edge, simulate_edge, EdgeController, SimulationNoise};
use crate::sysmodels::{linearize, LinearizedSystem, NominalTrajectory, NonlinearModel, SensorModel};

use super::BeliefNode;

/// Edge admission gates, in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// No compatible nominal trajectory (or the mean problem failed).
    Cnt,
    /// Mean trajectory leaves the world or enters an obstacle.
    Obstacle,
    /// Terminal filter prior does not fit inside the destination's `P̃₋`.
    Filter,
    /// Covariance program infeasible or unsolved.
    Covariance,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Cnt, Gate::Obstacle, Gate::Filter, Gate::Covariance];

    pub fn name(self) -> &'static str {
        match self {
            Gate::Cnt => "cnt",
            Gate::Obstacle => "obstacle",
            Gate::Filter => "filter",
            Gate::Covariance => "covariance",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    Cnt(String),
    Obstacle { step: usize },
    Filter { margin: f64 },
    FilterFailure(String),
    Covariance(String),
}

impl Rejection {
    pub fn gate(&self) -> Gate {
        match self {
            Rejection::Cnt(_) => Gate::Cnt,
            Rejection::Obstacle { .. } => Gate::Obstacle,
            Rejection::Filter { .. } | Rejection::FilterFailure(_) => Gate::Filter,
            Rejection::Covariance(_) => Gate::Covariance,
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Cnt(m) => write!(f, "nominal trajectory: {m}"),
            Rejection::Obstacle { step } => write!(f, "mean trajectory blocked at step {step}"),
            Rejection::Filter { margin } => {
                write!(f, "terminal error covariance exceeds destination (margin {margin:.3e})")
            }
            Rejection::FilterFailure(m) => write!(f, "filter: {m}"),
            Rejection::Covariance(m) => write!(f, "covariance program: {m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeCosts {
    pub mean: f64,
    pub cov: f64,
    /// Raw Monte-Carlo collision probability.
    pub collision_probability: f64,
    /// `w₁·mean + w₂·cov + w₃·collision_probability`.
    pub total: f64,
}

impl EdgeCosts {
    pub fn new(mean: f64, cov: f64, collision_probability: f64, weights: &CostConfig) -> Self {
        let mut c = EdgeCosts {
            mean,
            cov,
            collision_probability,
            total: 0.0,
        };
        c.total = c.recompose(weights);
        c
    }

    pub fn recompose(&self, w: &CostConfig) -> f64 {
        w.w_mean * self.mean + w.w_cov * self.cov + w.w_collision * self.collision_probability
    }
}

#[derive(Debug, Clone)]
pub struct RoadmapEdge {
    pub from: usize,
    pub to: usize,
    /// Compatible nominal trajectory `τ` the edge was linearized about.
    pub nominal: NominalTrajectory,
    pub cnt_residuals: Vec<f64>,
    pub system: LinearizedSystem,
    pub controller: EdgeController,
    pub costs: EdgeCosts,
}

/// Read-only state shared by all edge attempts of one build.
#[derive(Debug, Clone)]
pub struct EdgeContext<'a> {
    pub scenario: &'a Scenario,
    pub model: NonlinearModel,
    pub sensor: SensorModel,
    pub seed: u64,
}

impl<'a> EdgeContext<'a> {
    pub fn new(scenario: &'a Scenario, seed: u64) -> Result<Self> {
        Ok(EdgeContext {
            scenario,
            model: scenario.nonlinear_model()?,
            sensor: scenario.sensor_model(),
            seed,
        })
    }

    /// All gates, then Monte-Carlo collision costing.
    pub fn build_edge(&self, from: &BeliefNode, to: &BeliefNode) -> std::result::Result<RoadmapEdge, Rejection> {
        let mut edge = self.design_edge(from, to)?;
        let mut rng = rng::stream(self.seed, Stream::MonteCarlo, &[from.key[0], from.key[1], to.key[0], to.key[1]]);
        let p = monte_carlo_collision(self, &edge, from, self.scenario.monte_carlo.samples, &mut rng)
            .map_err(|e| Rejection::Covariance(e.to_string()))?;
        edge.costs = EdgeCosts::new(edge.costs.mean, edge.costs.cov, p, &self.scenario.costs);
        Ok(edge)
    }

    /// Gates 1–5; the returned edge has a zero collision probability.
    pub fn design_edge(&self, from: &BeliefNode, to: &BeliefNode) -> std::result::Result<RoadmapEdge, Rejection> {
        let sc = self.scenario;
        let x0 = &from.mean;
        let xn = unwrap_target(sc.kind(), x0, &to.mean);
        let weights = sc.edge_weights(x0, &xn);

        let init = straight_line_guess(&self.model, x0, &to.mean, sc.horizon());
        let cnt = compute_cnt(&self.model, &self.sensor, x0, &xn, &weights, &init, &sc.cnt)
            .map_err(|e| Rejection::Cnt(e.to_string()))?;
        let nominal = cnt.trajectory;

        for (k, x) in nominal.states.iter().enumerate() {
            if !sc.state_is_free(x).unwrap_or(false) {
                return Err(Rejection::Obstacle { step: k });
            }
        }

        let system = linearize(&self.model, &self.sensor, &nominal)
            .map_err(|e| Rejection::FilterFailure(e.to_string()))?;
        let filter = kf_rollout(&system, &from.p_tilde_prior)
            .map_err(|e| Rejection::FilterFailure(e.to_string()))?;
        let margin = psd_margin(filter.terminal_prior(), &to.p_tilde_prior);
        if margin < -sc.roadmap.admission_tol {
            return Err(Rejection::Filter { margin });
        }

        let stacked = assemble(&system, &filter).map_err(|e| Rejection::FilterFailure(e.to_string()))?;
        let controller = finish_edge(&stacked, &weights, x0, &xn, &from.p_hat_prior, &to.p_hat, &sc.solver)
            .map_err(|e| Rejection::Covariance(e.to_string()))?;
        let costs = EdgeCosts::new(controller.mean_cost, controller.cov_cost, 0.0, &sc.costs);
        Ok(RoadmapEdge {
            from: from.id,
            to: to.id,
            nominal,
            cnt_residuals: cnt.residual_history,
            system,
            controller,
            costs,
        })
    }
}

/// Fraction of `m` closed-loop rollouts whose true state leaves free space at
/// any step. Initial beliefs are drawn from the source node: `x̂₀₋ ~ N(x̄, P̂₋)`
/// and `x₀ = x̂₀₋ + e` with `e ~ N(0, P̃₋)`. Rollouts the model rejects count
/// as collisions.
pub fn monte_carlo_collision<R: Rng + ?Sized>(
    ctx: &EdgeContext<'_>,
    edge: &RoadmapEdge,
    from: &BeliefNode,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let hat_factor = psd_factor(&from.p_hat_prior);
    let tilde_factor = psd_factor(&from.p_tilde_prior);
    let zero = DVector::zeros(from.mean.len());
    let mut hits = 0usize;
    for _ in 0..m {
        let x_hat = rng::gaussian(rng, &from.mean, &hat_factor);
        let x0 = &x_hat + rng::gaussian(rng, &zero, &tilde_factor);
        let r = simulate_edge(
            &edge.controller,
            &edge.system,
            &ctx.model,
            &ctx.sensor,
            &x0,
            &x_hat,
            rng,
            SimulationNoise::default(),
        )?;
        let mut hit = !r.completed();
        for x in &r.states {
            if hit {
                break;
            }
            hit = !ctx.scenario.state_is_free(x)?;
        }
        hits += usize::from(hit);
    }
    Ok(hits as f64 / m.max(1) as f64)
}
