//! Compatible nominal trajectories: iterate linearize → mean solve until the
//! mean trajectory reproduces the linearization point.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::{solve_mean, CostWeights, StackedDynamics};
use crate::sysmodels::{linearize, ModelKind, NominalTrajectory, NonlinearModel, SensorModel, GRAVITY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CntOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Consecutive residual increases that switch on 0.5 averaging.
    pub damping_after: usize,
}

impl Default for CntOptions {
    fn default() -> Self {
        CntOptions {
            tol: 1e-4,
            max_iter: 50,
            damping_after: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CntResult {
    pub trajectory: NominalTrajectory,
    pub iterations: usize,
    /// Max-norm change between successive trajectories, one entry per iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Whether 0.5 averaging was switched on at some point.
    pub damped: bool,
}

impl CntResult {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Fixed-point iteration from `init`. Returns `NotConverged` if the residual
/// stays above `tol` after `max_iter` iterations.
pub fn compute_cnt(
    model: &NonlinearModel,
    sensor: &SensorModel,
    x0: &DVector<f64>,
    xn: &DVector<f64>,
    weights: &CostWeights,
    init: &NominalTrajectory,
    opts: &CntOptions,
) -> Result<CntResult> {
    let result = iterate_cnt(model, sensor, x0, xn, weights, init, opts)?;
    if !result.converged {
        return Err(Error::NotConverged {
            what: format!("nominal trajectory (residual {:.3e})", result.final_residual()),
            iterations: result.iterations,
        });
    }
    Ok(result)
}

/// Same iteration, returning the unconverged state instead of an error.
pub fn iterate_cnt(
    model: &NonlinearModel,
    sensor: &SensorModel,
    x0: &DVector<f64>,
    xn: &DVector<f64>,
    weights: &CostWeights,
    init: &NominalTrajectory,
    opts: &CntOptions,
) -> Result<CntResult> {
    init.validate(model)?;
    if (&init.states[0] - x0).amax() > 1e-9 {
        return Err(Error::Precondition(
            "initial trajectory must start at the source mean".into(),
        ));
    }
    let mut nominal = init.clone();
    let mut history = Vec::new();
    let mut rising = 0usize;
    let mut damped = false;
    for iter in 1..=opts.max_iter {
        let sys = linearize(model, sensor, &nominal)?;
        let mean = solve_mean(&StackedDynamics::new(&sys), weights, x0, xn)?;
        let candidate = NominalTrajectory {
            states: mean.states_vec(),
            controls: mean.controls_vec(),
        };
        let residual = candidate.max_deviation(&nominal);
        if let Some(&prev) = history.last() {
            rising = if residual > prev { rising + 1 } else { 0 };
        }
        history.push(residual);
        if residual <= opts.tol {
            return Ok(CntResult {
                trajectory: candidate,
                iterations: iter,
                residual_history: history,
                converged: true,
                damped,
            });
        }
        if rising >= opts.damping_after {
            damped = true;
        }
        nominal = if damped {
            average(&nominal, &candidate)
        } else {
            candidate
        };
    }
    Ok(CntResult {
        trajectory: nominal,
        iterations: opts.max_iter,
        residual_history: history,
        converged: false,
        damped,
    })
}

fn average(a: &NominalTrajectory, b: &NominalTrajectory) -> NominalTrajectory {
    let mix = |xs: &[DVector<f64>], ys: &[DVector<f64>]| -> Vec<DVector<f64>> {
        xs.iter().zip(ys).map(|(x, y)| (x + y) * 0.5).collect()
    };
    NominalTrajectory {
        states: mix(&a.states, &b.states),
        controls: mix(&a.controls, &b.controls),
    }
}

/// Terminal error of rolling the nominal controls through the deterministic
/// nonlinear model from the nominal initial state.
pub fn open_loop_defect(model: &NonlinearModel, traj: &NominalTrajectory) -> Result<f64> {
    let mut x = traj.states[0].clone();
    for u in &traj.controls {
        x = model.step_deterministic(&x, u)?;
    }
    Ok((x - traj.states.last().expect("non-empty")).amax())
}

/// Largest one-step defect `‖f(x_k, u_k) − x_{k+1}‖∞` along a trajectory.
pub fn step_defect(model: &NonlinearModel, traj: &NominalTrajectory) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..traj.horizon() {
        let next = model.step_deterministic(&traj.states[k], &traj.controls[k])?;
        worst = worst.max((next - &traj.states[k + 1]).amax());
    }
    Ok(worst)
}

/// Wrap an angle difference into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Terminal mean with the heading unwrapped to the nearest branch relative
/// to the source heading.
pub fn unwrap_target(kind: ModelKind, x0: &DVector<f64>, xn: &DVector<f64>) -> DVector<f64> {
    let mut out = xn.clone();
    if kind == ModelKind::FixedWing {
        out[3] = x0[3] + wrap_angle(xn[3] - x0[3]);
    }
    out
}

/// Straight-line initialization in every state and control coordinate.
///
/// Double integrator: states interpolate linearly and the control is the
/// constant acceleration that matches the velocity change. Fixed wing: the
/// control is the constant trim `(V, γ, φ)` that covers the straight-line
/// distance, climb and heading change in `N` steps.
pub fn straight_line_guess(
    model: &NonlinearModel,
    x0: &DVector<f64>,
    xn: &DVector<f64>,
    horizon: usize,
) -> NominalTrajectory {
    let xn = unwrap_target(model.kind, x0, xn);
    let t = horizon as f64 * model.dt;
    let u = match model.kind {
        ModelKind::DoubleIntegrator2D => {
            DVector::from_vec(vec![(xn[2] - x0[2]) / t, (xn[3] - x0[3]) / t])
        }
        ModelKind::FixedWing => {
            let d = xn.rows(0, 3) - x0.rows(0, 3);
            let horizontal = d[0].hypot(d[1]);
            let v = (d.norm() / t).max(1e-3);
            let gamma = d[2].atan2(horizontal);
            let turn_rate = (xn[3] - x0[3]) / t;
            let phi = (v * turn_rate / GRAVITY).atan();
            DVector::from_vec(vec![v, gamma, phi])
        }
    };
    NominalTrajectory::straight_line(x0, &xn, &u, &u, horizon)
}
