use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{psd_factor, symmetrized};
use crate::sysmodels::LinearizedSystem;

use super::covariance::feedback_to_f;
use super::StackedSystem;

/// Predicted per-step moments of a closed-loop edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMoments {
    pub mean: Vec<DVector<f64>>,
    /// Estimated-state covariances `P̂_k`.
    pub p_hat: Vec<DMatrix<f64>>,
    /// Estimation-error covariances `P̃_k`.
    pub p_tilde: Vec<DMatrix<f64>>,
    /// State covariances `P_k = P̂_k + P̃_k`.
    pub p_total: Vec<DMatrix<f64>>,
}

impl EdgeMoments {
    pub fn terminal_hat(&self) -> &DMatrix<f64> {
        self.p_hat.last().expect("non-empty")
    }

    pub fn terminal_total(&self) -> &DMatrix<f64> {
        self.p_total.last().expect("non-empty")
    }
}

/// Closed-loop moments from the stacked model: `Cov(X̌) = (I+ℬF)P_Z(I+ℬF)ᵀ`.
pub fn closed_loop_moments(
    stacked: &StackedSystem,
    mean: &[DVector<f64>],
    feedback: &DMatrix<f64>,
    p_hat0_prior: &DMatrix<f64>,
) -> Result<EdgeMoments> {
    let dy = &stacked.dynamics;
    let (n_x, n) = (dy.n_x, dy.horizon);
    if mean.len() != n + 1 {
        return Err(Error::dims("mean trajectory length", n + 1, mean.len()));
    }
    if feedback.shape() != (n * dy.n_u, (n + 1) * n_x) {
        return Err(Error::dims("feedback rows", n * dy.n_u, feedback.nrows()));
    }
    let f = feedback_to_f(&dy.b, feedback)?;
    let dim = dy.b.nrows();
    let ibf = DMatrix::identity(dim, dim) + &dy.b * &f;
    let cov = &ibf * stacked.z_covariance(p_hat0_prior) * ibf.transpose();
    let mut p_hat = Vec::with_capacity(n + 1);
    let mut p_total = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let blk = symmetrized(cov.view((k * n_x, k * n_x), (n_x, n_x)).into_owned());
        p_total.push(&blk + &stacked.filter.posterior[k]);
        p_hat.push(blk);
    }
    Ok(EdgeMoments {
        mean: mean.to_vec(),
        p_hat,
        p_tilde: stacked.filter.posterior.clone(),
        p_total,
    })
}

/// Exact second moments of the estimated-state deviation `x̌` and the
/// estimation error `e` when an edge is executed with its stored filter gains
/// and feedback, starting from an arbitrary joint covariance of `(x̌₀, e₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPropagation {
    /// `Cov(x̌_k)` after the step-k update.
    pub hat: Vec<DMatrix<f64>>,
    /// `Cov(e_k)` after the step-k update.
    pub tilde: Vec<DMatrix<f64>>,
    /// `Cov(x̌_k, e_k)`.
    pub cross: Vec<DMatrix<f64>>,
}

impl JointPropagation {
    pub fn total(&self, k: usize) -> DMatrix<f64> {
        symmetrized(&self.hat[k] + &self.tilde[k] + &self.cross[k] + self.cross[k].transpose())
    }

    /// Joint covariance of `(x̌_k, e_k)`.
    pub fn joint(&self, k: usize) -> DMatrix<f64> {
        let n = self.hat[k].nrows();
        let mut j = DMatrix::zeros(2 * n, 2 * n);
        j.view_mut((0, 0), (n, n)).copy_from(&self.hat[k]);
        j.view_mut((n, n), (n, n)).copy_from(&self.tilde[k]);
        j.view_mut((0, n), (n, n)).copy_from(&self.cross[k]);
        j.view_mut((n, 0), (n, n)).copy_from(&self.cross[k].transpose());
        j
    }
}

/// Propagate `(x̌, e)` through one edge.
///
/// `joint0` is the joint covariance at step 0. With `update_first` it is the
/// prior pair `(x̌₀₋, e₀₋)` and the step-0 measurement is applied; otherwise it
/// is already the posterior pair (an edge entered from a previous edge's
/// arrival, whose last update was the node's measurement).
pub fn propagate_joint(
    sys: &LinearizedSystem,
    filter_gains: &[DMatrix<f64>],
    feedback: &DMatrix<f64>,
    joint0: &DMatrix<f64>,
    update_first: bool,
) -> Result<JointPropagation> {
    let (n_x, n_u, n) = (sys.n_x(), sys.n_u(), sys.horizon());
    let n_w = sys.g[0].ncols();
    let n_y = sys.n_y();
    if joint0.shape() != (2 * n_x, 2 * n_x) {
        return Err(Error::dims("joint covariance", 2 * n_x, joint0.nrows()));
    }
    if filter_gains.len() != n + 1 {
        return Err(Error::dims("filter gains", n + 1, filter_gains.len()));
    }
    if feedback.shape() != (n * n_u, (n + 1) * n_x) {
        return Err(Error::dims("feedback rows", n * n_u, feedback.nrows()));
    }

    // Every quantity is a linear map of a standard normal base vector
    // ζ = [z₀; w₀; v₀; w₁; v₁; …], with joint0 = factor·factorᵀ for z₀.
    let base = 2 * n_x + (n + 1) * (n_w + n_y);
    let factor = psd_factor(&symmetrized(joint0.clone()));
    let mut mx = DMatrix::zeros(n_x, base);
    let mut me = DMatrix::zeros(n_x, base);
    mx.view_mut((0, 0), (n_x, 2 * n_x)).copy_from(&factor.rows(0, n_x));
    me.view_mut((0, 0), (n_x, 2 * n_x)).copy_from(&factor.rows(n_x, n_x));
    let noise_col = |k: usize| 2 * n_x + k * (n_w + n_y);

    let update = |k: usize, mx: &mut DMatrix<f64>, me: &mut DMatrix<f64>| {
        let mut nu = &sys.c[k] * &*me;
        nu.view_mut((0, noise_col(k) + n_w), (n_y, n_y))
            .copy_from(&sys.d[k]);
        let correction = &filter_gains[k] * nu;
        *mx += &correction;
        *me -= &correction;
    };

    if update_first {
        update(0, &mut mx, &mut me);
    }
    let mut hist_x = vec![mx.clone()];
    let mut out = JointPropagation {
        hat: Vec::with_capacity(n + 1),
        tilde: Vec::with_capacity(n + 1),
        cross: Vec::with_capacity(n + 1),
    };
    let push = |out: &mut JointPropagation, mx: &DMatrix<f64>, me: &DMatrix<f64>| {
        out.hat.push(symmetrized(mx * mx.transpose()));
        out.tilde.push(symmetrized(me * me.transpose()));
        out.cross.push(mx * me.transpose());
    };
    push(&mut out, &mx, &me);

    for k in 0..n {
        let mut u = DMatrix::zeros(n_u, base);
        for (i, xi) in hist_x.iter().enumerate() {
            let blk = feedback.view((k * n_u, i * n_x), (n_u, n_x));
            if blk.amax() != 0.0 {
                u += blk * xi;
            }
        }
        let mut next_x = &sys.a[k] * &mx + &sys.b[k] * u;
        let mut next_e = &sys.a[k] * &me;
        let mut noise = next_e.view_mut((0, noise_col(k)), (n_x, n_w));
        noise += &sys.g[k];
        update(k + 1, &mut next_x, &mut next_e);
        mx = next_x;
        me = next_e;
        push(&mut out, &mx, &me);
        hist_x.push(mx.clone());
    }
    Ok(out)
}
