//! Output-feedback covariance steering for a single roadmap edge.
//!
//! The edge problem splits into a deterministic mean problem ([`solve_mean`])
//! and a covariance problem over causal feedback on the estimated-state
//! deviation ([`solve_cov`]). [`design_edge`] runs the whole pipeline once the
//! system has been linearized.

mod covariance;
mod mean;
mod moments;
mod simulate;
mod stacked;

pub use covariance::{evaluate_f, feedback_to_f, solve_cov, CovSolution, CovSolverOptions};
pub use mean::{mean_cost, solve_mean, MeanSolution};
pub use moments::{closed_loop_moments, propagate_joint, EdgeMoments, JointPropagation};
pub use simulate::{simulate_edge, simulate_from, Rollout, SimulationNoise};
pub use stacked::{assemble, StackedDynamics, StackedSystem};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimation::{kf_rollout, FilterRollout};
use crate::linalg::{self, block_diag};
use crate::sysmodels::LinearizedSystem;

/// Quadratic tracking weights for one edge. `q` and `r` have `N` entries; the
/// terminal state weight is zero because the terminal state is constrained.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    /// Reference `m_k`, k = 0..=N.
    pub reference: Vec<DVector<f64>>,
}

impl CostWeights {
    /// Time-invariant weights `Q_k = q·I`, `R_k = r·I` with a straight-line
    /// reference between the edge endpoints.
    pub fn diagonal(
        horizon: usize,
        n_u: usize,
        q: f64,
        r: f64,
        x0: &DVector<f64>,
        xn: &DVector<f64>,
    ) -> Self {
        let n_x = x0.len();
        CostWeights {
            q: vec![DMatrix::identity(n_x, n_x) * q; horizon],
            r: vec![DMatrix::identity(n_u, n_u) * r; horizon],
            reference: straight_reference(horizon, x0, xn),
        }
    }

    /// Time-invariant diagonal weights `Q_k = diag(q)`, `R_k = diag(r)`.
    pub fn from_diagonals(
        horizon: usize,
        q: &[f64],
        r: &[f64],
        x0: &DVector<f64>,
        xn: &DVector<f64>,
    ) -> Self {
        let qm = DMatrix::from_diagonal(&DVector::from_column_slice(q));
        let rm = DMatrix::from_diagonal(&DVector::from_column_slice(r));
        CostWeights {
            q: vec![qm; horizon],
            r: vec![rm; horizon],
            reference: straight_reference(horizon, x0, xn),
        }
    }

    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    /// `M_rᵀ Q M_r`, the term dropped from the mean objective.
    pub fn reference_offset(&self) -> f64 {
        let m = self.stacked_reference();
        m.dot(&(self.stacked_q() * &m))
    }

    pub fn validate(&self, n_x: usize, n_u: usize, horizon: usize) -> Result<()> {
        if self.q.len() != horizon || self.r.len() != horizon {
            return Err(Error::dims("cost weight horizon", horizon, self.q.len().min(self.r.len())));
        }
        if self.reference.len() != horizon + 1 {
            return Err(Error::dims("reference length", horizon + 1, self.reference.len()));
        }
        for (k, q) in self.q.iter().enumerate() {
            if q.shape() != (n_x, n_x) {
                return Err(Error::dims(format!("Q_{k}"), n_x, q.nrows()));
            }
            if !linalg::is_psd(q, linalg::PSD_TOL) {
                return Err(Error::Precondition(format!("Q_{k} must be PSD")));
            }
        }
        for (k, r) in self.r.iter().enumerate() {
            if r.shape() != (n_u, n_u) {
                return Err(Error::dims(format!("R_{k}"), n_u, r.nrows()));
            }
            if linalg::min_eigenvalue(r) <= 0.0 {
                return Err(Error::Precondition(format!("R_{k} must be positive definite")));
            }
        }
        for (k, m) in self.reference.iter().enumerate() {
            if m.len() != n_x {
                return Err(Error::dims(format!("reference m_{k}"), n_x, m.len()));
            }
        }
        Ok(())
    }

    /// `blkdiag(Q_0, …, Q_{N−1}, 0)`.
    pub fn stacked_q(&self) -> DMatrix<f64> {
        let n_x = self.q[0].nrows();
        let mut blocks = self.q.clone();
        blocks.push(DMatrix::zeros(n_x, n_x));
        block_diag(&blocks)
    }

    pub fn stacked_r(&self) -> DMatrix<f64> {
        block_diag(&self.r)
    }

    pub fn stacked_reference(&self) -> DVector<f64> {
        let n_x = self.reference[0].len();
        let mut out = DVector::zeros(self.reference.len() * n_x);
        for (k, m) in self.reference.iter().enumerate() {
            out.rows_mut(k * n_x, n_x).copy_from(m);
        }
        out
    }
}

pub fn straight_reference(horizon: usize, x0: &DVector<f64>, xn: &DVector<f64>) -> Vec<DVector<f64>> {
    (0..=horizon)
        .map(|k| {
            let s = k as f64 / horizon.max(1) as f64;
            x0 * (1.0 - s) + xn * s
        })
        .collect()
}

/// Everything needed to execute and evaluate one edge.
#[derive(Debug, Clone)]
pub struct EdgeController {
    pub mean_controls: Vec<DVector<f64>>,
    pub mean_states: Vec<DVector<f64>>,
    /// Dense causal gain `K`, `N n_u × (N+1) n_x`; only diagonal blocks are
    /// nonzero for the controllers produced here.
    pub feedback: DMatrix<f64>,
    pub filter: FilterRollout,
    pub moments: EdgeMoments,
    /// Mean objective including the constant reference term, so it is the
    /// nonnegative tracking cost `‖X̄ − M_r‖²_Q + ‖Ū‖²_R`.
    pub mean_cost: f64,
    pub cov_cost: f64,
}

impl EdgeController {
    pub fn horizon(&self) -> usize {
        self.mean_controls.len()
    }

    pub fn n_x(&self) -> usize {
        self.mean_states[0].len()
    }

    pub fn n_u(&self) -> usize {
        self.mean_controls[0].len()
    }

    /// Block `K_{k,i}`.
    pub fn gain_block(&self, k: usize, i: usize) -> DMatrix<f64> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        self.feedback
            .view((k * n_u, i * n_x), (n_u, n_x))
            .into_owned()
    }

    /// Feedback correction `ũ_k = Σ_{i≤k} K_{k,i} x̌_i` from the estimated
    /// deviations observed so far.
    pub fn correction(&self, k: usize, deviations: &[DVector<f64>]) -> DVector<f64> {
        let mut u = DVector::zeros(self.n_u());
        for (i, dx) in deviations.iter().enumerate().take(k + 1) {
            let blk = self.feedback.view((k * self.n_u(), i * self.n_x()), (self.n_u(), self.n_x()));
            if blk.amax() != 0.0 {
                u += blk * dx;
            }
        }
        u
    }

    pub fn stacked_mean_controls(&self) -> DVector<f64> {
        let n_u = self.n_u();
        let mut out = DVector::zeros(self.horizon() * n_u);
        for (k, u) in self.mean_controls.iter().enumerate() {
            out.rows_mut(k * n_u, n_u).copy_from(u);
        }
        out
    }
}

/// Solve mean and covariance problems for an already linearized edge.
///
/// `p_hat0_prior` and `p_tilde0_prior` describe the source node; `target` is
/// the destination's a-posteriori estimated-state covariance.
pub fn design_edge(
    sys: &LinearizedSystem,
    weights: &CostWeights,
    x0: &DVector<f64>,
    xn: &DVector<f64>,
    p_hat0_prior: &DMatrix<f64>,
    p_tilde0_prior: &DMatrix<f64>,
    target: &DMatrix<f64>,
    opts: &CovSolverOptions,
) -> Result<EdgeController> {
    let filter = kf_rollout(sys, p_tilde0_prior)?;
    let stacked = assemble(sys, &filter)?;
    finish_edge(&stacked, weights, x0, xn, p_hat0_prior, target, opts)
}

/// Mean and covariance solve on an assembled system.
pub fn finish_edge(
    stacked: &StackedSystem,
    weights: &CostWeights,
    x0: &DVector<f64>,
    xn: &DVector<f64>,
    p_hat0_prior: &DMatrix<f64>,
    target: &DMatrix<f64>,
    opts: &CovSolverOptions,
) -> Result<EdgeController> {
    let mean = solve_mean(&stacked.dynamics, weights, x0, xn)?;
    let cov = solve_cov(stacked, weights, p_hat0_prior, target, opts)?;
    let moments = closed_loop_moments(stacked, &mean.states_vec(), &cov.feedback, p_hat0_prior)?;
    Ok(EdgeController {
        mean_controls: mean.controls_vec(),
        mean_states: mean.states_vec(),
        feedback: cov.feedback,
        filter: stacked.filter.clone(),
        moments,
        mean_cost: mean.cost + weights.reference_offset(),
        cov_cost: cov.cost,
    })
}
