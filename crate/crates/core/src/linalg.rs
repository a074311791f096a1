//! Small dense linear-algebra helpers shared by the filter, the steering
//! solvers and the roadmap.
//!
//! All covariance comparisons in the crate go through [`psd_margin`], which
//! returns `λ_min(upper − lower)`; callers compare it against their own slack.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default slack for Loewner-order comparisons.
pub const PSD_TOL: f64 = 1e-9;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrized(m.clone()))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrized(m.clone()))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `λ_min(upper − lower)`; nonnegative iff `lower ⪯ upper`.
pub fn psd_margin(lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> f64 {
    min_eigenvalue(&(upper - lower))
}

pub fn psd_leq(lower: &DMatrix<f64>, upper: &DMatrix<f64>, tol: f64) -> bool {
    psd_margin(lower, upper) >= -tol
}

pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= 1e-8 * (1.0 + m.amax()) && min_eigenvalue(m) >= -tol
}

/// Largest absolute entry of `m − mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Principal square root of a symmetric PSD matrix; tiny negative eigenvalues
/// from round-off are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Inverse principal square root of a symmetric positive definite matrix.
pub fn pd_inv_sqrt(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrized(m.clone()));
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l <= 1e-14 * scale) {
        return Err(Error::NotPositiveDefinite(context.to_string()));
    }
    let vals = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrized(m.clone())
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))?;
    Ok(symmetrized(chol.inverse()))
}

/// Lower-triangular factor `S` with `S Sᵀ = m` for a PSD `m` (eigen-based, so
/// singular covariances are fine).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    match symmetrized(m.clone()).cholesky() {
        Some(c) => c.l(),
        None => psd_sqrt(m),
    }
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// Relative Frobenius distance `‖a − b‖_F / ‖b‖_F`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Row-major matrix with explicit dimensions, the on-disk form of every
/// matrix the crate exports.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixRecord {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::dims(
                "matrix record",
                self.rows * self.cols,
                self.data.len(),
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// `#[serde(with = ...)]` adapters so domain types can hold nalgebra values
/// directly while the JSON stays row-major.
pub mod serde_matrix {
    use super::MatrixRecord;
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixRecord::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        MatrixRecord::deserialize(d)?
            .to_matrix()
            .map_err(D::Error::custom)
    }

    pub mod vec {
        use super::MatrixRecord;
        use nalgebra::DMatrix;
        use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter()
                .map(MatrixRecord::from)
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Vec::<MatrixRecord>::deserialize(d)?
                .iter()
                .map(|r| r.to_matrix().map_err(D::Error::custom))
                .collect()
        }
    }
}

pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }

    pub mod vec {
        use nalgebra::DVector;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(vs: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
            vs.iter()
                .map(|v| v.as_slice().to_vec())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
            Ok(Vec::<Vec<f64>>::deserialize(d)?
                .into_iter()
                .map(DVector::from_vec)
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).amax() < 1e-12);
    }

    #[test]
    fn margin_detects_order() {
        let a = DMatrix::from_diagonal_element(2, 2, 1.0);
        let b = DMatrix::from_diagonal_element(2, 2, 2.0);
        assert!(psd_leq(&a, &b, 0.0));
        assert!(!psd_leq(&b, &a, 1e-9));
        assert!((psd_margin(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn record_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = MatrixRecord::from(&m);
        assert_eq!(r.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(r.to_matrix().unwrap(), m);
    }

    #[test]
    fn inv_sqrt_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(pd_inv_sqrt(&m, "test").is_err());
    }
}
