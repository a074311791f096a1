//! Kalman-filter covariance recursion along a linearized edge.
//!
//! A measurement is taken at every step `k = 0..=N`, including the first, so
//! the filter starts from the prior error covariance `P̃₀₋` and immediately
//! applies an update.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, psd_margin, symmetrized};
use crate::sysmodels::LinearizedSystem;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterRollout {
    /// Kalman gains `L_k`, k = 0..=N.
    pub gains: Vec<DMatrix<f64>>,
    /// Prior error covariances `P̃_{k−}`.
    pub prior: Vec<DMatrix<f64>>,
    /// Posterior error covariances `P̃_k`.
    pub posterior: Vec<DMatrix<f64>>,
    /// Innovation covariances `P_{ξ_k}`.
    pub innovation: Vec<DMatrix<f64>>,
}

impl FilterRollout {
    pub fn horizon(&self) -> usize {
        self.gains.len() - 1
    }

    /// Covariance injected into the estimate by step k's innovation, `L P_ξ Lᵀ`.
    pub fn injection(&self, k: usize) -> DMatrix<f64> {
        symmetrized(&self.gains[k] * &self.innovation[k] * self.gains[k].transpose())
    }

    pub fn terminal_prior(&self) -> &DMatrix<f64> {
        self.prior.last().expect("non-empty rollout")
    }
}

pub struct MeasurementUpdate {
    pub gain: DMatrix<f64>,
    pub posterior: DMatrix<f64>,
    pub innovation: DMatrix<f64>,
}

/// Single optimal measurement update from a prior error covariance.
pub fn measurement_update(
    prior: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<MeasurementUpdate> {
    let innovation = symmetrized(c * prior * c.transpose() + d * d.transpose());
    let chol = innovation
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
    // L = P̃₋ Cᵀ S⁻¹  ⇔  S Lᵀ = C P̃₋
    let gain = chol.solve(&(c * prior)).transpose();
    let n = prior.nrows();
    let posterior = symmetrized((DMatrix::identity(n, n) - &gain * c) * prior);
    Ok(MeasurementUpdate {
        gain,
        posterior,
        innovation,
    })
}

pub fn kf_rollout(sys: &LinearizedSystem, p0_prior: &DMatrix<f64>) -> Result<FilterRollout> {
    let n_x = sys.n_x();
    if p0_prior.shape() != (n_x, n_x) {
        return Err(Error::dims("initial error covariance", n_x, p0_prior.nrows()));
    }
    if !linalg::is_psd(p0_prior, linalg::PSD_TOL) {
        return Err(Error::Precondition(
            "initial error covariance must be symmetric PSD".into(),
        ));
    }
    let n = sys.horizon();
    let mut out = FilterRollout {
        gains: Vec::with_capacity(n + 1),
        prior: Vec::with_capacity(n + 1),
        posterior: Vec::with_capacity(n + 1),
        innovation: Vec::with_capacity(n + 1),
    };
    let mut prior = symmetrized(p0_prior.clone());
    for k in 0..=n {
        let upd = measurement_update(&prior, &sys.c[k], &sys.d[k])?;
        out.prior.push(prior);
        if k < n {
            prior = symmetrized(
                &sys.a[k] * &upd.posterior * sys.a[k].transpose()
                    + &sys.g[k] * sys.g[k].transpose(),
            );
        } else {
            prior = DMatrix::zeros(0, 0);
        }
        out.gains.push(upd.gain);
        out.posterior.push(upd.posterior);
        out.innovation.push(upd.innovation);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    /// `λ_min(P̃_{k−} − P̃′_{k−})` per step.
    pub prior_margins: Vec<f64>,
    /// `λ_min(P̃_k − P̃′_k)` per step.
    pub posterior_margins: Vec<f64>,
    pub holds: Vec<bool>,
    pub tol: f64,
}

impl MonotoneReport {
    pub fn all_hold(&self) -> bool {
        self.holds.iter().all(|&h| h)
    }

    pub fn worst_margin(&self) -> f64 {
        self.prior_margins
            .iter()
            .chain(&self.posterior_margins)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Run the filter from two ordered initial error covariances and report, per
/// step, whether the order is preserved.
pub fn check_monotone(
    sys: &LinearizedSystem,
    p0: &DMatrix<f64>,
    p0_smaller: &DMatrix<f64>,
    tol: f64,
) -> Result<MonotoneReport> {
    if psd_margin(p0_smaller, p0) < -tol {
        return Err(Error::Precondition(
            "second initial covariance must be dominated by the first".into(),
        ));
    }
    let big = kf_rollout(sys, p0)?;
    let small = kf_rollout(sys, p0_smaller)?;
    let prior_margins: Vec<f64> = big
        .prior
        .iter()
        .zip(&small.prior)
        .map(|(b, s)| psd_margin(s, b))
        .collect();
    let posterior_margins: Vec<f64> = big
        .posterior
        .iter()
        .zip(&small.posterior)
        .map(|(b, s)| psd_margin(s, b))
        .collect();
    let holds = prior_margins
        .iter()
        .zip(&posterior_margins)
        .map(|(&a, &b)| a >= -tol && b >= -tol)
        .collect();
    Ok(MonotoneReport {
        prior_margins,
        posterior_margins,
        holds,
        tol,
    })
}
