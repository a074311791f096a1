use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrized};

use super::{CostWeights, StackedDynamics};

/// Below this ratio of extreme eigenvalues the terminal reachability Gramian
/// `B̄_N W B̄_Nᵀ` is treated as singular.
const GRAMIAN_CONDITION_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanSolution {
    /// Stacked `Ū`, `N n_u`.
    pub controls: DVector<f64>,
    /// Stacked `X̄`, `(N+1) n_x`.
    pub states: DVector<f64>,
    /// `X̄ᵀQX̄ + ŪᵀRŪ − 2X̄ᵀQM_r`.
    pub cost: f64,
    pub n_x: usize,
    pub n_u: usize,
}

impl MeanSolution {
    pub fn states_vec(&self) -> Vec<DVector<f64>> {
        split(&self.states, self.n_x)
    }

    pub fn controls_vec(&self) -> Vec<DVector<f64>> {
        split(&self.controls, self.n_u)
    }

    pub fn terminal(&self) -> DVector<f64> {
        let len = self.states.len();
        self.states.rows(len - self.n_x, self.n_x).into_owned()
    }
}

fn split(v: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..v.len() / n)
        .map(|k| v.rows(k * n, n).into_owned())
        .collect()
}

/// Mean-control objective for given stacked states and controls.
pub fn mean_cost(weights: &CostWeights, states: &DVector<f64>, controls: &DVector<f64>) -> f64 {
    let q = weights.stacked_q();
    let r = weights.stacked_r();
    let m = weights.stacked_reference();
    let qx = &q * states;
    states.dot(&qx) + controls.dot(&(&r * controls)) - 2.0 * qx.dot(&m)
}

/// Closed-form minimizer of the mean tracking cost subject to the hard
/// terminal constraint `E_N X̄ = x̄_N`.
pub fn solve_mean(
    dy: &StackedDynamics,
    weights: &CostWeights,
    x0: &DVector<f64>,
    xn: &DVector<f64>,
) -> Result<MeanSolution> {
    let (n_x, n_u, n) = (dy.n_x, dy.n_u, dy.horizon);
    if x0.len() != n_x {
        return Err(Error::dims("initial mean", n_x, x0.len()));
    }
    if xn.len() != n_x {
        return Err(Error::dims("terminal mean", n_x, xn.len()));
    }
    weights.validate(n_x, n_u, n)?;

    let q = weights.stacked_q();
    let r = weights.stacked_r();
    let m_r = weights.stacked_reference();
    let bt_q = dy.b.transpose() * &q;
    let w = spd_inverse(&(&bt_q * &dy.b + &r), "mean-control Hessian")?;
    let free = &dy.a * x0 + &dy.h;
    let v = &bt_q * (&free - &m_r);

    let rows = n * n_x;
    let b_n = dy.b.rows(rows, n_x).into_owned();
    let free_n = free.rows(rows, n_x).into_owned();
    let w_bt = &w * b_n.transpose();
    let gram = symmetrized(&b_n * &w_bt);
    let eig = gram.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &l| (lo.min(l), hi.max(l.abs())));
    let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    if !(ratio > GRAMIAN_CONDITION_FLOOR) {
        return Err(Error::Uncontrollable(ratio.max(0.0)));
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::Uncontrollable(ratio))?;

    let wv = &w * &v;
    let rhs = xn - &free_n + &b_n * &wv;
    let mut controls = -&wv + &w_bt * chol.solve(&rhs);

    // Iterative refinement of the terminal constraint; corrections lie in the
    // range of W B̄_Nᵀ, so stationarity is unaffected.
    for _ in 0..2 {
        let defect = xn - (&free_n + &b_n * &controls);
        if defect.amax() == 0.0 {
            break;
        }
        controls += &w_bt * chol.solve(&defect);
    }

    let states = &free + &dy.b * &controls;
    let cost = mean_cost(weights, &states, &controls);
    Ok(MeanSolution {
        controls,
        states,
        cost,
        n_x,
        n_u,
    })
}
