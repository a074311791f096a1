//! Vehicle dynamics, landmark sensing and their linearization along a nominal
//! trajectory into the time-varying affine Gaussian form
//!
//! ```text
//! x_{k+1} = A_k x_k + B_k u_k + h_k + G_k w_k
//! y_k     = C_k x_k + D_k v_k
//! ```
//!
//! Two vehicles are supported: a planar double integrator with state
//! `[px, py, vx, vy]` and acceleration input, and a kinematic fixed-wing
//! aircraft with state `[x, y, z, ψ]` and input `[V, γ, φ]` (airspeed,
//! flight-path angle, bank angle). The heading ψ is never wrapped here.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "double_integrator")]
    DoubleIntegrator2D,
    FixedWing,
}

impl ModelKind {
    pub fn state_dim(self) -> usize {
        4
    }

    pub fn control_dim(self) -> usize {
        match self {
            ModelKind::DoubleIntegrator2D => 2,
            ModelKind::FixedWing => 3,
        }
    }

    pub fn noise_dim(self) -> usize {
        4
    }

    /// Number of leading state components that are a workspace position.
    pub fn position_dim(self) -> usize {
        match self {
            ModelKind::DoubleIntegrator2D => 2,
            ModelKind::FixedWing => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearModel {
    pub kind: ModelKind,
    pub dt: f64,
    /// Per-state multipliers `g_i` on the standard Gaussian process noise.
    pub noise_gains: Vec<f64>,
}

impl NonlinearModel {
    pub fn new(kind: ModelKind, dt: f64, noise_gains: Vec<f64>) -> Result<Self> {
        let model = NonlinearModel {
            kind,
            dt,
            noise_gains,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::validation("model.dt", "time step must be positive"));
        }
        if self.noise_gains.len() != self.n_w() {
            return Err(Error::dims(
                "model.noise_gains",
                self.n_w(),
                self.noise_gains.len(),
            ));
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn n_u(&self) -> usize {
        self.kind.control_dim()
    }

    pub fn n_w(&self) -> usize {
        self.kind.noise_dim()
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_x() {
            return Err(Error::dims("state", self.n_x(), x.len()));
        }
        if u.len() != self.n_u() {
            return Err(Error::dims("control", self.n_u(), u.len()));
        }
        Ok(())
    }

    fn check_fixed_wing_input(u: &DVector<f64>) -> Result<()> {
        if !(u[0] > 0.0) {
            return Err(Error::InvalidAirspeed(u[0]));
        }
        if u[2].abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::InvalidBankAngle(u[2]));
        }
        Ok(())
    }

    /// One step of the stochastic dynamics `f(x, u, w)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        if w.len() != self.n_w() {
            return Err(Error::dims("process noise", self.n_w(), w.len()));
        }
        let mut next = self.step_deterministic(x, u)?;
        for i in 0..self.n_w() {
            next[i] += self.noise_gains[i] * w[i];
        }
        Ok(next)
    }

    /// `f(x, u, 0)`.
    pub fn step_deterministic(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        let dt = self.dt;
        Ok(match self.kind {
            ModelKind::DoubleIntegrator2D => {
                let h2 = 0.5 * dt * dt;
                DVector::from_vec(vec![
                    x[0] + dt * x[2] + h2 * u[0],
                    x[1] + dt * x[3] + h2 * u[1],
                    x[2] + dt * u[0],
                    x[3] + dt * u[1],
                ])
            }
            ModelKind::FixedWing => {
                Self::check_fixed_wing_input(u)?;
                let (v, gamma, phi) = (u[0], u[1], u[2]);
                let psi = x[3];
                DVector::from_vec(vec![
                    x[0] + v * psi.cos() * gamma.cos() * dt,
                    x[1] + v * psi.sin() * gamma.cos() * dt,
                    x[2] + v * gamma.sin() * dt,
                    psi + GRAVITY / v * phi.tan() * dt,
                ])
            }
        })
    }

    /// Analytic Jacobians `(∂f/∂x, ∂f/∂u)` at `(x, u, 0)`.
    pub fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x, u)?;
        let dt = self.dt;
        match self.kind {
            ModelKind::DoubleIntegrator2D => {
                let a = DMatrix::from_row_slice(
                    4,
                    4,
                    &[
                        1.0, 0.0, dt, 0.0, //
                        0.0, 1.0, 0.0, dt, //
                        0.0, 0.0, 1.0, 0.0, //
                        0.0, 0.0, 0.0, 1.0,
                    ],
                );
                let h2 = 0.5 * dt * dt;
                let b = DMatrix::from_row_slice(4, 2, &[h2, 0.0, 0.0, h2, dt, 0.0, 0.0, dt]);
                Ok((a, b))
            }
            ModelKind::FixedWing => {
                Self::check_fixed_wing_input(u)?;
                let (v, gamma, phi) = (u[0], u[1], u[2]);
                let psi = x[3];
                let (sp, cp) = psi.sin_cos();
                let (sg, cg) = gamma.sin_cos();
                let mut a = DMatrix::identity(4, 4);
                a[(0, 3)] = -v * sp * cg * dt;
                a[(1, 3)] = v * cp * cg * dt;
                let sec2 = 1.0 / (phi.cos() * phi.cos());
                let b = DMatrix::from_row_slice(
                    4,
                    3,
                    &[
                        cp * cg * dt, -v * cp * sg * dt, 0.0, //
                        sp * cg * dt, -v * sp * sg * dt, 0.0, //
                        sg * dt, v * cg * dt, 0.0, //
                        -GRAVITY / (v * v) * phi.tan() * dt, 0.0, GRAVITY / v * sec2 * dt,
                    ],
                );
                Ok((a, b))
            }
        }
    }

    /// `∂f/∂w`, constant for both vehicles.
    pub fn noise_jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.noise_gains))
    }

    pub fn position(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.kind.position_dim()).into_owned()
    }
}

/// Landmark range-dependent sensing.
///
/// Each landmark `j` yields a noisy copy of the position-like block whose
/// noise scales with the distance `d_j` to that landmark. The double
/// integrator additionally gets a single velocity measurement with constant
/// noise `η_v`. The fixed-wing block is `[x, y, z, ψ]` with every component
/// scaled by `η·d_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub kind: ModelKind,
    #[serde(with = "crate::linalg::serde_vector::vec")]
    pub landmarks: Vec<DVector<f64>>,
    pub eta_position: f64,
    pub eta_velocity: f64,
    pub eta: f64,
    /// Lower bound on `d_j` used only when building the linear noise matrix,
    /// so that `D Dᵀ` stays invertible at a landmark.
    pub distance_floor: f64,
}

impl SensorModel {
    fn block_dim(&self) -> usize {
        match self.kind {
            ModelKind::DoubleIntegrator2D => 2,
            ModelKind::FixedWing => 4,
        }
    }

    pub fn n_y(&self) -> usize {
        let l = self.landmarks.len();
        match self.kind {
            ModelKind::DoubleIntegrator2D => 2 * l + 2,
            ModelKind::FixedWing => 4 * l,
        }
    }

    pub fn distances(&self, x: &DVector<f64>) -> Vec<f64> {
        let p = self.kind.position_dim();
        let pos = x.rows(0, p);
        self.landmarks.iter().map(|lm| (pos - lm).norm()).collect()
    }

    fn noise_scales(&self, x: &DVector<f64>, floor: f64) -> Vec<f64> {
        let mut scales = Vec::with_capacity(self.n_y());
        let eta = match self.kind {
            ModelKind::DoubleIntegrator2D => self.eta_position,
            ModelKind::FixedWing => self.eta,
        };
        for d in self.distances(x) {
            let s = eta * d.max(floor);
            scales.extend(std::iter::repeat(s).take(self.block_dim()));
        }
        if self.kind == ModelKind::DoubleIntegrator2D {
            scales.extend([self.eta_velocity, self.eta_velocity]);
        }
        scales
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if self.landmarks.is_empty() {
            return Err(Error::validation("landmarks", "at least one landmark is required"));
        }
        if x.len() != self.kind.state_dim() {
            return Err(Error::dims("state", self.kind.state_dim(), x.len()));
        }
        Ok(())
    }

    /// Noise-free part of the measurement, `C x`.
    fn selection(&self) -> DMatrix<f64> {
        let n_x = self.kind.state_dim();
        let mut c = DMatrix::zeros(self.n_y(), n_x);
        let bd = self.block_dim();
        for j in 0..self.landmarks.len() {
            for i in 0..bd {
                c[(j * bd + i, i)] = 1.0;
            }
        }
        if self.kind == ModelKind::DoubleIntegrator2D {
            let off = bd * self.landmarks.len();
            c[(off, 2)] = 1.0;
            c[(off + 1, 3)] = 1.0;
        }
        c
    }

    /// `h(x, v)` with the true distance-dependent noise scale.
    pub fn measure(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        if v.len() != self.n_y() {
            return Err(Error::dims("measurement noise", self.n_y(), v.len()));
        }
        let scales = DVector::from_vec(self.noise_scales(x, 0.0));
        Ok(self.selection() * x + scales.component_mul(v))
    }

    /// `(C, D)` at `x`, with the noise scale frozen at that point.
    pub fn linearize(&self, x: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(x)?;
        let scales = DVector::from_vec(self.noise_scales(x, self.distance_floor));
        Ok((self.selection(), DMatrix::from_diagonal(&scales)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalTrajectory {
    #[serde(with = "crate::linalg::serde_vector::vec")]
    pub states: Vec<DVector<f64>>,
    #[serde(with = "crate::linalg::serde_vector::vec")]
    pub controls: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn validate(&self, model: &NonlinearModel) -> Result<()> {
        if self.states.len() != self.controls.len() + 1 {
            return Err(Error::dims(
                "nominal states",
                self.controls.len() + 1,
                self.states.len(),
            ));
        }
        if self.controls.is_empty() {
            return Err(Error::validation("nominal", "horizon must be at least one step"));
        }
        for x in &self.states {
            if x.len() != model.n_x() {
                return Err(Error::dims("nominal state", model.n_x(), x.len()));
            }
        }
        for u in &self.controls {
            if u.len() != model.n_u() {
                return Err(Error::dims("nominal control", model.n_u(), u.len()));
            }
        }
        Ok(())
    }

    /// Largest ∞-norm deviation over all states and controls.
    pub fn max_deviation(&self, other: &NominalTrajectory) -> f64 {
        let xs = self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).amax());
        let us = self
            .controls
            .iter()
            .zip(&other.controls)
            .map(|(a, b)| (a - b).amax());
        xs.chain(us).fold(0.0, f64::max)
    }

    /// Straight lines in every state and control coordinate.
    pub fn straight_line(
        x0: &DVector<f64>,
        x_n: &DVector<f64>,
        u0: &DVector<f64>,
        u_n: &DVector<f64>,
        horizon: usize,
    ) -> Self {
        let n = horizon as f64;
        let states = (0..=horizon)
            .map(|k| x0 + (x_n - x0) * (k as f64 / n))
            .collect();
        let controls = (0..horizon)
            .map(|k| {
                let s = if horizon > 1 { k as f64 / (n - 1.0) } else { 0.0 };
                u0 + (u_n - u0) * s
            })
            .collect();
        NominalTrajectory { states, controls }
    }
}

/// Time-varying affine Gaussian model along a nominal trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub h: Vec<DVector<f64>>,
    /// Observation matrices for k = 0..=N.
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
}

impl LinearizedSystem {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn n_x(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c[0].nrows()
    }

    /// Checks mutual consistency of every block and `D_k D_kᵀ ≻ 0`.
    pub fn validate(&self) -> Result<()> {
        let n = self.horizon();
        if n == 0 {
            return Err(Error::validation("system", "empty horizon"));
        }
        for (name, len, want) in [
            ("B", self.b.len(), n),
            ("G", self.g.len(), n),
            ("h", self.h.len(), n),
            ("C", self.c.len(), n + 1),
            ("D", self.d.len(), n + 1),
        ] {
            if len != want {
                return Err(Error::dims(format!("system {name} length"), want, len));
            }
        }
        let (nx, nu, ny) = (self.n_x(), self.n_u(), self.n_y());
        for k in 0..n {
            if self.a[k].shape() != (nx, nx) {
                return Err(Error::dims(format!("A[{k}] rows"), nx, self.a[k].nrows()));
            }
            if self.b[k].shape() != (nx, nu) {
                return Err(Error::dims(format!("B[{k}] columns"), nu, self.b[k].ncols()));
            }
            if self.g[k].nrows() != nx {
                return Err(Error::dims(format!("G[{k}] rows"), nx, self.g[k].nrows()));
            }
            if self.h[k].len() != nx {
                return Err(Error::dims(format!("h[{k}]"), nx, self.h[k].len()));
            }
        }
        for k in 0..=n {
            if self.c[k].shape() != (ny, nx) {
                return Err(Error::dims(format!("C[{k}] columns"), nx, self.c[k].ncols()));
            }
            if self.d[k].shape() != (ny, ny) {
                return Err(Error::dims(format!("D[{k}] rows"), ny, self.d[k].nrows()));
            }
            let ddt = &self.d[k] * self.d[k].transpose();
            if ddt.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite(format!("D[{k}] D[{k}]^T")));
            }
        }
        Ok(())
    }

    /// Affine prediction `A_k x + B_k u + h_k`.
    pub fn predict(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a[k] * x + &self.b[k] * u + &self.h[k]
    }
}

/// Linearize dynamics and sensing along `nom`.
pub fn linearize(
    model: &NonlinearModel,
    sensor: &SensorModel,
    nom: &NominalTrajectory,
) -> Result<LinearizedSystem> {
    nom.validate(model)?;
    let n = nom.horizon();
    let g = model.noise_jacobian();
    let mut sys = LinearizedSystem {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        g: vec![g; n],
        h: Vec::with_capacity(n),
        c: Vec::with_capacity(n + 1),
        d: Vec::with_capacity(n + 1),
    };
    for k in 0..n {
        let (x, u) = (&nom.states[k], &nom.controls[k]);
        let (a, b) = model.jacobians(x, u)?;
        let next = model.step_deterministic(x, u)?;
        sys.h.push(next - &a * x - &b * u);
        sys.a.push(a);
        sys.b.push(b);
    }
    for x in &nom.states {
        let (c, d) = sensor.linearize(x)?;
        sys.c.push(c);
        sys.d.push(d);
    }
    Ok(sys)
}
