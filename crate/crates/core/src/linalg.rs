//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, VfemError};

/// Eigenvalue floor applied when repairing covariance blocks.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Largest condition number accepted by [`solve_spd_with_ridge`].
pub const MAX_CONDITION: f64 = 1e14;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrize and clamp eigenvalues below `floor` up to `floor`.
///
/// Returns the repaired matrix and whether any eigenvalue was clamped.
pub fn repair_psd(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (sym, false);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let q = &eig.eigenvectors;
    let rebuilt = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    (symmetrize(&rebuilt), true)
}

pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    SymmetricEigen::new(symmetrize(m)).eigenvalues
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(m);
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `a x = b` for symmetric positive (semi)definite `a`.
///
/// On failure, or when `a` is too badly conditioned, retries once with
/// `a + λI`, `λ = 1e-8 · tr(a) / dim`.
pub fn solve_spd_with_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = a.nrows();
    let a = symmetrize(a);
    if condition_number(&a) <= MAX_CONDITION {
        if let Some(chol) = a.clone().cholesky() {
            return Ok(chol.solve(b));
        }
    }
    let lambda = 1e-8 * a.trace() / dim as f64;
    let ridged = &a + DMatrix::identity(dim, dim) * lambda;
    let cond = condition_number(&ridged);
    if !(cond <= MAX_CONDITION) {
        return Err(VfemError::SingularSystem(format!(
            "condition number {cond:.3e} after ridge λ = {lambda:.3e}"
        )));
    }
    ridged
        .cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| VfemError::SingularSystem("ridge-regularized system not positive definite".into()))
}

/// General inverse via LU, with a relative pivot check.
pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let lu = m.clone().lu();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > 1e-14 * scale) {
        return Err(VfemError::SingularSystem(format!("{what} is numerically singular")));
    }
    lu.try_inverse()
        .ok_or_else(|| VfemError::SingularSystem(format!("{what} is numerically singular")))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z: &Complex<f64>| z.norm())
        .fold(0.0, f64::max)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Number of free entries in a symmetric `dim × dim` matrix.
pub fn vech_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Row-major lower triangle: (0,0), (1,0), (1,1), (2,0), ...
pub fn vech_indices(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(|a| (0..=a).map(move |b| (a, b)))
}

pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    vech_indices(m.nrows()).map(|(a, b)| m[(a, b)]).collect()
}

pub fn unvech(values: &[f64], dim: usize) -> DMatrix<f64> {
    debug_assert_eq!(values.len(), vech_len(dim));
    let mut m = DMatrix::zeros(dim, dim);
    for ((a, b), &v) in vech_indices(dim).zip(values) {
        m[(a, b)] = v;
        m[(b, a)] = v;
    }
    m
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = symmetrize(m).cholesky()?;
    Some(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vech_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 2.0, 1.0, 5.0, 3.0, 2.0, 3.0, 6.0]);
        let v = vech(&m);
        assert_eq!(v, vec![4.0, 1.0, 5.0, 2.0, 3.0, 6.0]);
        assert_eq!(unvech(&v, 3), m);
    }

    #[test]
    fn repair_clamps_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (r, flagged) = repair_psd(&m, EIGEN_FLOOR);
        assert!(flagged);
        assert!(symmetric_eigenvalues(&r).min() >= EIGEN_FLOOR * 0.99);
        let (same, flagged) = repair_psd(&DMatrix::identity(2, 2), EIGEN_FLOOR);
        assert!(!flagged);
        assert_eq!(same, DMatrix::identity(2, 2));
    }

    #[test]
    fn ridge_rescues_singular_system() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let x = solve_spd_with_ridge(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() < 1e-6);
        let zero = DMatrix::zeros(2, 2);
        assert!(matches!(solve_spd_with_ridge(&zero, &b), Err(VfemError::SingularSystem(_))));
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = solve_spd_with_ridge(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() < 1e-12);
    }

    #[test]
    fn spectral_radius_of_rotation_scaled() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&m) - 0.5).abs() < 1e-12);
        assert!((spectral_norm(&m) - 0.5).abs() < 1e-12);
    }
}
