//! Covariance steering program
//!
//! ```text
//! min_F  tr[((I+ℬF)ᵀQ(I+ℬF) + FᵀRF) P_Z]
//! s.t.   ‖P_Z^{1/2}(I+ℬF)ᵀE_Nᵀ S^{-1/2}‖₂ ≤ 1
//! ```
//!
//! over causal `F`. The constraint is the LMI `Σ_N(F) ⪯ S`. We dualize it with
//! a multiplier `Λ ⪰ 0` (an `n_x × n_x` matrix): for fixed `Λ` the Lagrangian
//! is a finite-horizon LQR problem on the estimated-state deviation with
//! terminal weight `Λ`, whose minimizer is memoryless state feedback
//! `ũ_k = K_k x̌_k` (the deviation is Markov, driven by white innovations).
//! The concave dual `g(Λ)` is maximized by a log-barrier Newton method whose
//! gradient is `Σ_N(Λ) − S` and whose Hessian comes from a forward/backward
//! sensitivity sweep. The causal `F = K(I − ℬK)⁻¹` is formed at the end, and
//! cost and constraint are re-evaluated from `F` directly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    is_psd, min_eigenvalue, pd_inv_sqrt, psd_sqrt, spectral_norm, symmetrized, PSD_TOL,
};

use super::{CostWeights, StackedSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovSolverOptions {
    /// Accepted excess of the spectral-norm constraint value over one.
    pub constraint_slack: f64,
    /// Accepted negative margin `λ_min(S − P̂_N)`.
    pub psd_slack: f64,
    /// Relative duality gap at termination.
    pub gap_tol: f64,
    /// Newton iterations across all barrier stages.
    pub max_iterations: usize,
}

impl Default for CovSolverOptions {
    fn default() -> Self {
        CovSolverOptions {
            constraint_slack: 1e-8,
            psd_slack: 1e-6,
            gap_tol: 1e-8,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovSolution {
    /// Per-step gains `K_k = K_{k,k}`.
    pub step_gains: Vec<DMatrix<f64>>,
    /// Dense causal `K`, `N n_u × (N+1) n_x`, with a zero final block column.
    pub feedback: DMatrix<f64>,
    /// `F = K(I − ℬK)⁻¹`, `N n_u × (N+1) n_x`.
    pub f: DMatrix<f64>,
    /// Objective evaluated from `F`.
    pub cost: f64,
    /// Spectral-norm constraint value evaluated from `F`.
    pub constraint_value: f64,
    /// Predicted `P̂_N`.
    pub terminal_covariance: DMatrix<f64>,
    /// Terminal multiplier `Λ`.
    pub multiplier: DMatrix<f64>,
    /// `tr(Λ(S − P̂_N))`, the primal/dual gap of the returned pair.
    pub duality_gap: f64,
    pub iterations: usize,
}

struct LqrData<'a> {
    a: &'a [DMatrix<f64>],
    b: &'a [DMatrix<f64>],
    q: &'a [DMatrix<f64>],
    r: &'a [DMatrix<f64>],
    sigma0: DMatrix<f64>,
    /// Innovation injections for k = 1..=N (index k−1).
    inject: Vec<DMatrix<f64>>,
}

struct LqrEval {
    gains: Vec<DMatrix<f64>>,
    closed: Vec<DMatrix<f64>>,
    m_chol: Vec<Cholesky<f64, Dyn>>,
    sigma: Vec<DMatrix<f64>>,
    cost: f64,
}

impl LqrEval {
    fn terminal(&self) -> &DMatrix<f64> {
        self.sigma.last().expect("non-empty")
    }
}

impl LqrData<'_> {
    fn horizon(&self) -> usize {
        self.a.len()
    }

    fn evaluate(&self, lambda: &DMatrix<f64>) -> Result<LqrEval> {
        let n = self.horizon();
        let mut gains = vec![DMatrix::zeros(0, 0); n];
        let mut closed = vec![DMatrix::zeros(0, 0); n];
        let mut m_chol = Vec::with_capacity(n);
        let mut pi = lambda.clone();
        for k in (0..n).rev() {
            let (a, b) = (&self.a[k], &self.b[k]);
            let bt_pi = b.transpose() * &pi;
            let m = symmetrized(&self.r[k] + &bt_pi * b);
            let chol = m
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("Riccati control Hessian".into()))?;
            let gain = -chol.solve(&(&bt_pi * a));
            let acl = a + b * &gain;
            pi = symmetrized(&self.q[k] + a.transpose() * &pi * &acl);
            gains[k] = gain;
            closed[k] = acl;
            m_chol.push(chol);
        }
        m_chol.reverse();

        let mut sigma = Vec::with_capacity(n + 1);
        sigma.push(self.sigma0.clone());
        let mut cost = 0.0;
        for k in 0..n {
            let s = &sigma[k];
            cost += (&self.q[k] * s).trace()
                + (&self.r[k] * &gains[k] * s * gains[k].transpose()).trace();
            let next = symmetrized(&closed[k] * s * closed[k].transpose() + &self.inject[k]);
            sigma.push(next);
        }
        Ok(LqrEval {
            gains,
            closed,
            m_chol,
            sigma,
            cost,
        })
    }

    /// Directional derivative of `Σ_N` with respect to the terminal weight.
    fn terminal_sensitivity(&self, ev: &LqrEval, dir: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.horizon();
        let mut d_gain = vec![DMatrix::zeros(0, 0); n];
        let mut d_pi = dir.clone();
        for k in (0..n).rev() {
            let acl = &ev.closed[k];
            let rhs = self.b[k].transpose() * &d_pi * acl;
            d_gain[k] = -ev.m_chol[k].solve(&rhs);
            d_pi = symmetrized(acl.transpose() * &d_pi * acl);
        }
        let mut d_sigma = DMatrix::zeros(dir.nrows(), dir.ncols());
        for k in 0..n {
            let acl = &ev.closed[k];
            let cross = &self.b[k] * &d_gain[k] * &ev.sigma[k] * acl.transpose();
            d_sigma = acl * &d_sigma * acl.transpose() + &cross + cross.transpose();
        }
        symmetrized(d_sigma)
    }
}

/// Coordinates on symmetric matrices: `Λ = Σ λ_a E_a` with `E_a = e_ieᵢᵀ` on
/// the diagonal and `e_ie_jᵀ + e_je_iᵀ` off it.
struct SymBasis {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl SymBasis {
    fn new(n: usize) -> Self {
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i..n {
                pairs.push((i, j));
            }
        }
        SymBasis { n, pairs }
    }

    fn dim(&self) -> usize {
        self.pairs.len()
    }

    fn element(&self, a: usize) -> DMatrix<f64> {
        let (i, j) = self.pairs[a];
        let mut e = DMatrix::zeros(self.n, self.n);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    }

    fn matrix(&self, coords: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (a, &(i, j)) in self.pairs.iter().enumerate() {
            m[(i, j)] += coords[a];
            if i != j {
                m[(j, i)] += coords[a];
            }
        }
        m
    }

    /// `tr(E_a M)` for every `a`.
    fn pair(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.pairs.iter().map(|&(i, j)| {
                if i == j {
                    m[(i, i)]
                } else {
                    m[(i, j)] + m[(j, i)]
                }
            }),
        )
    }
}

struct BarrierPoint {
    lambda: DMatrix<f64>,
    lambda_inv: DMatrix<f64>,
    eval: LqrEval,
    /// `g(Λ) + μ log det Λ`.
    value: f64,
}

fn barrier_point(
    data: &LqrData,
    target: &DMatrix<f64>,
    lambda: DMatrix<f64>,
    mu: f64,
) -> Result<Option<BarrierPoint>> {
    let chol = match symmetrized(lambda.clone()).cholesky() {
        Some(c) => c,
        None => return Ok(None),
    };
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let lambda_inv = symmetrized(chol.inverse());
    let eval = data.evaluate(&lambda)?;
    let dual = eval.cost + (&lambda * (eval.terminal() - target)).trace();
    Ok(Some(BarrierPoint {
        lambda,
        lambda_inv,
        value: dual + mu * log_det,
        eval,
    }))
}

/// Multiplier magnitude beyond which the target is declared unreachable.
const MULTIPLIER_BLOWUP: f64 = 1e12;

fn solve_dual(
    data: &LqrData,
    target: &DMatrix<f64>,
    opts: &CovSolverOptions,
) -> Result<(DMatrix<f64>, LqrEval, usize)> {
    let n_x = target.nrows();
    let basis = SymBasis::new(n_x);
    let target_inv = crate::linalg::spd_inverse(target, "covariance target")?;

    let lambda = target_inv;
    let probe = data.evaluate(&lambda)?;
    let grad0 = probe.terminal() - target;
    // μ that best centers the starting point: S − Σ_N ≈ μ Λ⁻¹ = μ S.
    let mut mu = {
        let num = -(&grad0).dot(target);
        let den = target.norm_squared();
        (num / den).max(1e-6 * (1.0 + probe.cost.abs()))
    };
    let mut point = barrier_point(data, target, lambda, mu)?
        .ok_or_else(|| Error::NotPositiveDefinite("initial multiplier".into()))?;

    for iter in 1..=opts.max_iterations {
        let sigma_n = point.eval.terminal();
        let slack = target - sigma_n;
        let feasible = min_eigenvalue(&slack) >= 0.0;
        let gap = (&point.lambda * &slack).trace();
        if feasible && gap <= opts.gap_tol * (1.0 + point.eval.cost.abs()) {
            return Ok((point.lambda, point.eval, iter - 1));
        }
        if point.lambda.amax() > MULTIPLIER_BLOWUP {
            return Err(Error::Infeasible(
                "terminal multiplier diverged; target unreachable over the horizon".into(),
            ));
        }

        // Newton step on φ(Λ) = g(Λ) + μ log det Λ.
        let grad = basis.pair(&(sigma_n - target + &point.lambda_inv * mu));
        let dim = basis.dim();
        let mut neg_hess = DMatrix::zeros(dim, dim);
        for b in 0..dim {
            let e = basis.element(b);
            let d_sigma = data.terminal_sensitivity(&point.eval, &e);
            let bar = &point.lambda_inv * &e * &point.lambda_inv * mu;
            let col = basis.pair(&(bar - d_sigma));
            neg_hess.set_column(b, &col);
        }
        let neg_hess = symmetrized(neg_hess);
        let step = match neg_hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                let shift = 1e-12 * neg_hess.diagonal().amax().max(1.0);
                symmetrized(neg_hess + DMatrix::identity(dim, dim) * shift)
                    .cholesky()
                    .ok_or_else(|| Error::NotPositiveDefinite("dual Newton system".into()))?
                    .solve(&grad)
            }
        };
        let decrement = grad.dot(&step);
        let dir = basis.matrix(&step);

        let mut t = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let cand = &point.lambda + &dir * t;
            if let Some(p) = barrier_point(data, target, cand, mu)? {
                if p.value >= point.value + 0.25 * t * decrement || t * decrement < 1e-15 * (1.0 + point.value.abs()) {
                    next = Some(p);
                    break;
                }
            }
            t *= 0.5;
        }
        let stalled = match next {
            Some(p) => {
                point = p;
                false
            }
            None => true,
        };
        if stalled || decrement <= 1e-3 * mu * n_x as f64 {
            mu *= 0.125;
            point = barrier_point(data, target, point.lambda.clone(), mu)?
                .ok_or_else(|| Error::NotPositiveDefinite("barrier iterate".into()))?;
        }
    }
    Err(Error::NotConverged {
        what: "covariance steering interior point".into(),
        iterations: opts.max_iterations,
    })
}

/// Solve the covariance program on the stacked system.
///
/// `p_hat0_prior` is `P̂₀₋` and `target` is the bound `S` on the terminal
/// a-posteriori estimated-state covariance. The innovation covariances are
/// taken from the filter rollout the system was assembled with.
pub fn solve_cov(
    stacked: &StackedSystem,
    weights: &CostWeights,
    p_hat0_prior: &DMatrix<f64>,
    target: &DMatrix<f64>,
    opts: &CovSolverOptions,
) -> Result<CovSolution> {
    let dy = &stacked.dynamics;
    let (n_x, n_u, n) = (dy.n_x, dy.n_u, dy.horizon);
    if p_hat0_prior.shape() != (n_x, n_x) {
        return Err(Error::dims("initial estimated-state covariance", n_x, p_hat0_prior.nrows()));
    }
    if target.shape() != (n_x, n_x) {
        return Err(Error::dims("covariance target", n_x, target.nrows()));
    }
    if !is_psd(p_hat0_prior, PSD_TOL) {
        return Err(Error::Precondition("initial estimated-state covariance must be PSD".into()));
    }
    if min_eigenvalue(target) <= 0.0 {
        return Err(Error::NotPositiveDefinite("covariance target".into()));
    }
    weights.validate(n_x, n_u, n)?;

    let filter = &stacked.filter;
    let data = LqrData {
        a: &stacked.sys.a,
        b: &stacked.sys.b,
        q: &weights.q,
        r: &weights.r,
        sigma0: symmetrized(p_hat0_prior + filter.injection(0)),
        inject: (1..=n).map(|k| filter.injection(k)).collect(),
    };
    let target = symmetrized(target.clone());

    // The final innovation enters after the last control: no policy can
    // remove it.
    let floor_margin = min_eigenvalue(&(&target - &data.inject[n - 1]));
    if floor_margin < 0.0 {
        return Err(Error::Infeasible(format!(
            "final innovation alone exceeds the target (margin {floor_margin:.3e})"
        )));
    }

    let zero = DMatrix::zeros(n_x, n_x);
    let unconstrained = data.evaluate(&zero)?;
    let (lambda, eval, iterations) = if min_eigenvalue(&(&target - unconstrained.terminal())) >= 0.0 {
        (zero, unconstrained, 0)
    } else {
        solve_dual(&data, &target, opts)?
    };

    let mut feedback = DMatrix::zeros(n * n_u, (n + 1) * n_x);
    for (k, g) in eval.gains.iter().enumerate() {
        feedback.view_mut((k * n_u, k * n_x), (n_u, n_x)).copy_from(g);
    }
    let f = feedback_to_f(&dy.b, &feedback)?;
    let p_z = stacked.z_covariance(p_hat0_prior);
    let (cost, constraint_value, terminal_covariance) =
        evaluate_f(stacked, weights, &f, &p_z, &target)?;

    let slack = min_eigenvalue(&(&target - &terminal_covariance));
    if constraint_value > 1.0 + opts.constraint_slack || slack < -opts.psd_slack {
        return Err(Error::NotConverged {
            what: format!(
                "covariance steering (constraint value {constraint_value:.3e}, margin {slack:.3e})"
            ),
            iterations,
        });
    }
    let duality_gap = (&lambda * (&target - &terminal_covariance)).trace();
    Ok(CovSolution {
        step_gains: eval.gains,
        feedback,
        f,
        cost,
        constraint_value,
        terminal_covariance,
        multiplier: lambda,
        duality_gap,
        iterations,
    })
}

/// `F = K(I − ℬK)⁻¹`; `I − ℬK` is unit lower-triangular for causal `K`.
pub fn feedback_to_f(b: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = b.nrows();
    let m = DMatrix::identity(dim, dim) - b * k;
    // Fᵀ = (I − ℬK)⁻ᵀ Kᵀ
    m.transpose()
        .solve_upper_triangular(&k.transpose())
        .map(|ft| ft.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("closed-loop map I − BK".into()))
}

/// Objective, spectral-norm constraint value and predicted `P̂_N` for a given
/// `F`, evaluated directly from the stacked matrices.
pub fn evaluate_f(
    stacked: &StackedSystem,
    weights: &CostWeights,
    f: &DMatrix<f64>,
    p_z: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<(f64, f64, DMatrix<f64>)> {
    let dy = &stacked.dynamics;
    let dim = dy.b.nrows();
    let ibf = DMatrix::identity(dim, dim) + &dy.b * f;
    let q = weights.stacked_q();
    let r = weights.stacked_r();
    let state_cov = &ibf * p_z * ibf.transpose();
    let cost = (&q * &state_cov).trace() + (&r * f * p_z * f.transpose()).trace();
    let e_n = dy.selector(dy.horizon);
    let terminal = symmetrized(&e_n * &state_cov * e_n.transpose());
    let s_inv_half = pd_inv_sqrt(target, "covariance target")?;
    let constraint = spectral_norm(&(psd_sqrt(p_z) * ibf.transpose() * e_n.transpose() * s_inv_half));
    Ok((cost, constraint, terminal))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::kf_rollout;
    use crate::steering::assemble;
    use crate::sysmodels::LinearizedSystem;

    fn scalar_no_measurement() -> StackedSystem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let sys = LinearizedSystem {
            a: vec![m(1.0)],
            b: vec![m(1.0)],
            g: vec![m(0.0)],
            h: vec![DVector::zeros(1)],
            c: vec![m(0.0); 2],
            d: vec![m(1.0); 2],
        };
        let f = kf_rollout(&sys, &m(0.0)).unwrap();
        assemble(&sys, &f).unwrap()
    }

    #[test]
    fn scalar_gain_and_cost() {
        let st = scalar_no_measurement();
        let x = DVector::zeros(1);
        let w = CostWeights::diagonal(1, 1, 0.0, 1.0, &x, &x);
        let sol = solve_cov(
            &st,
            &w,
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 0.25),
            &CovSolverOptions::default(),
        )
        .unwrap();
        assert!((sol.f[(0, 0)] + 0.5).abs() < 1e-6, "f = {}", sol.f[(0, 0)]);
        assert!((sol.cost - 0.25).abs() < 1e-6, "cost = {}", sol.cost);
        assert!((sol.multiplier[(0, 0)] - 1.0).abs() < 1e-4);
        assert!(sol.constraint_value <= 1.0 + 1e-8);
        assert_eq!(sol.f[(0, 1)], 0.0);
    }

    #[test]
    fn inactive_constraint_gives_zero_gain() {
        let st = scalar_no_measurement();
        let x = DVector::zeros(1);
        let w = CostWeights::diagonal(1, 1, 0.0, 1.0, &x, &x);
        let sol = solve_cov(
            &st,
            &w,
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 2.0),
            &CovSolverOptions::default(),
        )
        .unwrap();
        assert_eq!(sol.f.amax(), 0.0);
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn unreachable_target_is_infeasible() {
        // Process noise injected through the final innovation cannot be removed.
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        let sys = LinearizedSystem {
            a: vec![m(1.0); 2],
            b: vec![m(1.0); 2],
            g: vec![m(1.0); 2],
            h: vec![DVector::zeros(1); 2],
            c: vec![m(1.0); 3],
            d: vec![m(0.1); 3],
        };
        let st = assemble(&sys, &kf_rollout(&sys, &m(1.0)).unwrap()).unwrap();
        let x = DVector::zeros(1);
        let w = CostWeights::diagonal(2, 1, 0.0, 1.0, &x, &x);
        let err = solve_cov(&st, &w, &m(1.0), &m(1e-4), &CovSolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)));
    }

    #[test]
    fn basis_round_trip() {
        let b = SymBasis::new(3);
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = b.matrix(&c);
        assert_eq!(m[(0, 1)], 2.0);
        assert_eq!(m[(1, 0)], 2.0);
        // tr(E_a M) for M = Σ c_b E_b
        let g = DMatrix::from_fn(6, 6, |a, bb| (b.element(a) * b.element(bb)).trace());
        assert!((g * &c - b.pair(&m)).amax() < 1e-14);
    }
}
