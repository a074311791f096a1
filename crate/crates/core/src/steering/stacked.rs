use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimation::FilterRollout;
use crate::linalg::block_diag;
use crate::sysmodels::LinearizedSystem;

/// Dynamics part of the stacked estimated-state model,
/// `X̂ = 𝒜 x̂₀₋ + ℬ U + ℋ (+ ℒ Ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDynamics {
    pub n_x: usize,
    pub n_u: usize,
    pub horizon: usize,
    /// `(N+1)n_x × n_x`
    pub a: DMatrix<f64>,
    /// `(N+1)n_x × N n_u`, strictly block-lower-triangular in time.
    pub b: DMatrix<f64>,
    /// `(N+1)n_x`
    pub h: DVector<f64>,
}

impl StackedDynamics {
    pub fn new(sys: &LinearizedSystem) -> Self {
        let (n_x, n_u, n) = (sys.n_x(), sys.n_u(), sys.horizon());
        let mut a = DMatrix::zeros((n + 1) * n_x, n_x);
        let mut b = DMatrix::zeros((n + 1) * n_x, n * n_u);
        let mut h = DVector::zeros((n + 1) * n_x);
        a.view_mut((0, 0), (n_x, n_x)).fill_with_identity();
        for k in 0..n {
            let (r0, r1) = (k * n_x, (k + 1) * n_x);
            let ak = &sys.a[k];
            let next_a = ak * a.rows(r0, n_x);
            a.rows_mut(r1, n_x).copy_from(&next_a);
            let next_b = ak * b.rows(r0, n_x);
            b.rows_mut(r1, n_x).copy_from(&next_b);
            b.view_mut((r1, k * n_u), (n_x, n_u)).copy_from(&sys.b[k]);
            let next_h = ak * h.rows(r0, n_x) + &sys.h[k];
            h.rows_mut(r1, n_x).copy_from(&next_h);
        }
        StackedDynamics {
            n_x,
            n_u,
            horizon: n,
            a,
            b,
            h,
        }
    }

    /// Selection matrix `E_k` with `E_k X = x_k`.
    pub fn selector(&self, k: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_x, (self.horizon + 1) * self.n_x);
        e.view_mut((0, k * self.n_x), (self.n_x, self.n_x))
            .fill_with_identity();
        e
    }

    pub fn block<'a>(&self, v: &'a DVector<f64>, k: usize) -> DVector<f64> {
        v.rows(k * self.n_x, self.n_x).into_owned()
    }

    /// `𝒜 x₀ + ℬ U + ℋ`.
    pub fn rollout(&self, x0: &DVector<f64>, controls: &DVector<f64>) -> DVector<f64> {
        &self.a * x0 + &self.b * controls + &self.h
    }
}

/// Full stacked model including the innovation injection `ℒ` and the
/// per-step data it was built from.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub dynamics: StackedDynamics,
    /// `(N+1)n_x × (N+1)n_y`
    pub l: DMatrix<f64>,
    pub n_y: usize,
    pub sys: LinearizedSystem,
    pub filter: FilterRollout,
}

impl StackedSystem {
    /// Block-diagonal innovation covariance `P_Ξ`.
    pub fn innovation_covariance(&self) -> DMatrix<f64> {
        block_diag(&self.filter.innovation)
    }

    /// `P_Z = 𝒜 P̂₀₋ 𝒜ᵀ + ℒ P_Ξ ℒᵀ`.
    pub fn z_covariance(&self, p_hat0_prior: &DMatrix<f64>) -> DMatrix<f64> {
        let a = &self.dynamics.a;
        crate::linalg::symmetrized(
            a * p_hat0_prior * a.transpose()
                + &self.l * self.innovation_covariance() * self.l.transpose(),
        )
    }
}

pub fn assemble(sys: &LinearizedSystem, filter: &FilterRollout) -> Result<StackedSystem> {
    sys.validate()?;
    let n = sys.horizon();
    if filter.gains.len() != n + 1 {
        return Err(Error::dims("filter gains", n + 1, filter.gains.len()));
    }
    let (n_x, n_y) = (sys.n_x(), sys.n_y());
    for (k, l) in filter.gains.iter().enumerate() {
        if l.shape() != (n_x, n_y) {
            return Err(Error::dims(format!("filter gain {k} columns"), n_y, l.ncols()));
        }
    }
    let dynamics = StackedDynamics::new(sys);
    let mut l = DMatrix::zeros((n + 1) * n_x, (n + 1) * n_y);
    l.view_mut((0, 0), (n_x, n_y)).copy_from(&filter.gains[0]);
    for k in 0..n {
        let next = &sys.a[k] * l.rows(k * n_x, n_x);
        l.rows_mut((k + 1) * n_x, n_x).copy_from(&next);
        l.view_mut(((k + 1) * n_x, (k + 1) * n_y), (n_x, n_y))
            .copy_from(&filter.gains[k + 1]);
    }
    Ok(StackedSystem {
        dynamics,
        l,
        n_y,
        sys: sys.clone(),
        filter: filter.clone(),
    })
}
