#![allow(dead_code)]

use std::path::PathBuf;

use belief_roadmap::scenario::Scenario;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn diag(v: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { v } else { 0.0 }).collect()).collect()
}

/// Double integrator on `[0,10]²` with one central landmark, start at (2,5)
/// and goal at (8,5), both at rest.
pub fn open_world() -> Value {
    json!({
        "schema_version": "1.0",
        "name": "open world",
        "model": { "kind": "double_integrator", "dt": 0.2, "horizon": 20 },
        "sensing": { "landmarks": [[5.0, 5.0]] },
        "world": { "lower": [0.0, 0.0], "upper": [10.0, 10.0] },
        "obstacles": [],
        "sampling": {
            "mode": "nonstationary",
            "positions": 0,
            "hat_eigenvalues": { "position": [0.02, 0.06], "motion": [0.05, 0.15] },
            "tilde_eigenvalues": { "position": [0.05, 0.08], "motion": [0.06, 0.1] }
        },
        "roadmap": { "neighbor_radius": 7.0 },
        "monte_carlo": { "samples": 200 },
        "start": { "mean": [2.0, 5.0, 0.0, 0.0], "p_hat_prior": diag(0.03, 4), "p_tilde_prior": diag(0.06, 4) },
        "goal": { "mean": [8.0, 5.0, 0.0, 0.0], "p_hat_prior": diag(0.03, 4), "p_tilde_prior": diag(0.06, 4) }
    })
}

pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64) -> Value {
    json!({ "type": "polygon", "vertices": [[x0, y0], [x1, y0], [x1, y1], [x0, y1]] })
}

pub fn parse(v: &Value) -> Scenario {
    belief_roadmap::scenario::load_scenario(&v.to_string()).expect("valid scenario")
}

pub fn spd(rng: &mut impl rand::Rng, n: usize, lo: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
    &m * m.transpose() + DMatrix::identity(n, n) * lo
}

/// Plain Kalman filter recursion written out step by step, used as an
/// oracle for the library's filter. Returns `(gains, prior, posterior,
/// innovation)`.
pub fn kalman_oracle(
    a: &[DMatrix<f64>],
    g: &[DMatrix<f64>],
    c: &[DMatrix<f64>],
    d: &[DMatrix<f64>],
    p0: &DMatrix<f64>,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = a.len();
    let mut gains = Vec::new();
    let mut prior = vec![p0.clone()];
    let mut post = Vec::new();
    let mut innov = Vec::new();
    for k in 0..=n {
        let pm = &prior[k];
        let s = &c[k] * pm * c[k].transpose() + &d[k] * d[k].transpose();
        let l = pm * c[k].transpose() * s.clone().try_inverse().unwrap();
        let id = DMatrix::identity(pm.nrows(), pm.nrows());
        let ikc = &id - &l * &c[k];
        // Joseph form
        let p = &ikc * pm * ikc.transpose() + &l * &d[k] * d[k].transpose() * l.transpose();
        if k < n {
            prior.push(&a[k] * &p * a[k].transpose() + &g[k] * g[k].transpose());
        }
        gains.push(l);
        post.push(p);
        innov.push(s);
    }
    (gains, prior, post, innov)
}

pub fn sample_cov(xs: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = xs[0].len();
    let m = xs.len() as f64;
    let mean = xs.iter().fold(DVector::zeros(n), |a, x| a + x) / m;
    let mut cov = DMatrix::zeros(n, n);
    for x in xs {
        let dx = x - &mean;
        cov += &dx * dx.transpose();
    }
    (mean, cov / (m - 1.0))
}

pub fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
