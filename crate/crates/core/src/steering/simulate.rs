use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::sysmodels::{LinearizedSystem, NonlinearModel, SensorModel};

use super::EdgeController;

/// Which noise sources are active in a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationNoise {
    pub process: bool,
    pub measurement: bool,
}

impl Default for SimulationNoise {
    fn default() -> Self {
        SimulationNoise {
            process: true,
            measurement: true,
        }
    }
}

impl SimulationNoise {
    pub fn none() -> Self {
        SimulationNoise {
            process: false,
            measurement: false,
        }
    }
}

/// One closed-loop execution of an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// True states `x_k`, k = 0..=N (shorter if the rollout failed).
    pub states: Vec<DVector<f64>>,
    /// Posterior estimates `x̂_k`.
    pub estimates: Vec<DVector<f64>>,
    /// Applied controls `u_k = ū_k + ũ_k`.
    pub controls: Vec<DVector<f64>>,
    /// Set when the true dynamics rejected a state or control mid-rollout.
    pub failure: Option<String>,
}

impl Rollout {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Run the edge controller once through the nonlinear model with a filter
/// that uses the stored gains and the linearized prediction.
///
/// `x0` is the true initial state and `x_hat0_prior` the prior estimate; both
/// are samples from the source node's belief.
#[allow(clippy::too_many_arguments)]
pub fn simulate_edge<R: Rng + ?Sized>(
    controller: &EdgeController,
    sys: &LinearizedSystem,
    model: &NonlinearModel,
    sensor: &SensorModel,
    x0: &DVector<f64>,
    x_hat0_prior: &DVector<f64>,
    rng: &mut R,
    noise: SimulationNoise,
) -> Result<Rollout> {
    simulate_from(controller, sys, model, sensor, x0, x_hat0_prior, true, rng, noise)
}

/// Like [`simulate_edge`]; with `update_first == false` the supplied estimate
/// is already a posterior (edge entered from a preceding edge) and the step-0
/// measurement is skipped.
#[allow(clippy::too_many_arguments)]
pub fn simulate_from<R: Rng + ?Sized>(
    controller: &EdgeController,
    sys: &LinearizedSystem,
    model: &NonlinearModel,
    sensor: &SensorModel,
    x0: &DVector<f64>,
    x_hat0: &DVector<f64>,
    update_first: bool,
    rng: &mut R,
    noise: SimulationNoise,
) -> Result<Rollout> {
    let n = controller.horizon();
    if sys.horizon() != n {
        return Err(Error::dims("linearized horizon", n, sys.horizon()));
    }
    let n_x = controller.n_x();
    if x0.len() != n_x || x_hat0.len() != n_x {
        return Err(Error::dims("initial state sample", n_x, x0.len().min(x_hat0.len())));
    }
    let (n_w, n_y) = (model.n_w(), sensor.n_y());
    let draw_v = |rng: &mut R| {
        if noise.measurement {
            standard_normal(rng, n_y)
        } else {
            DVector::zeros(n_y)
        }
    };

    let gains = &controller.filter.gains;
    let correct = |k: usize, x: &DVector<f64>, prior: DVector<f64>, v: &DVector<f64>| -> Result<DVector<f64>> {
        let y = sensor.measure(x, v)?;
        let predicted = sensor.measure(&prior, &DVector::zeros(n_y))?;
        Ok(&prior + &gains[k] * (y - predicted))
    };

    let mut x = x0.clone();
    let mut x_hat = if update_first {
        let v = draw_v(rng);
        correct(0, &x, x_hat0.clone(), &v)?
    } else {
        x_hat0.clone()
    };
    let mut out = Rollout {
        states: vec![x.clone()],
        estimates: vec![x_hat.clone()],
        controls: Vec::with_capacity(n),
        failure: None,
    };
    let mut deviations = vec![&x_hat - &controller.mean_states[0]];

    for k in 0..n {
        let u = &controller.mean_controls[k] + controller.correction(k, &deviations);
        let w = if noise.process {
            standard_normal(rng, n_w)
        } else {
            DVector::zeros(n_w)
        };
        let v = draw_v(rng);
        x = match model.step(&x, &u, &w) {
            Ok(next) => next,
            Err(e) => {
                out.failure = Some(format!("step {k}: {e}"));
                return Ok(out);
            }
        };
        let prior = sys.predict(k, &x_hat, &u);
        x_hat = correct(k + 1, &x, prior, &v)?;
        deviations.push(&x_hat - &controller.mean_states[k + 1]);
        out.controls.push(u);
        out.states.push(x.clone());
        out.estimates.push(x_hat.clone());
    }
    Ok(out)
}
