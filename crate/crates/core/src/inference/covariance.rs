//! V = I_oc⁻¹ (I − Γ)⁻¹ and the Wald table.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Result, VfemError};
use crate::linalg::{inverse, repair_psd, symmetrize};

/// Critical value of the two-sided 5% test.
pub const Z_CRIT: f64 = 1.96;

pub fn asymptotic_covariance(info: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = info.nrows();
    let info_inv = inverse(info, "information matrix")?;
    let keep = DMatrix::identity(q, q) - gamma;
    let keep_inv = keep
        .lu()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| VfemError::SingularSystem("I − Γ is singular".into()))?;
    Ok(info_inv * keep_inv)
}

/// Symmetrized leading `p × p` block with negative eigenvalues clamped to 0.
pub fn beta_block(v: &DMatrix<f64>, p: usize) -> (DMatrix<f64>, bool) {
    repair_psd(&symmetrize(&v.view((0, 0), (p, p)).into_owned()), 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

impl CoefficientRow {
    pub fn significant(&self) -> bool {
        self.z.abs() > Z_CRIT
    }

    pub fn covers(&self, truth: f64) -> bool {
        (self.estimate - truth).abs() <= Z_CRIT * self.se
    }
}

pub fn wald_rows(names: &[String], beta: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<CoefficientRow> {
    (0..beta.len())
        .map(|j| {
            let se = cov[(j, j)].max(0.0).sqrt();
            let z = beta[j] / se;
            CoefficientRow {
                name: names[j].clone(),
                estimate: beta[j],
                se,
                z,
                p_value: erfc(z.abs() / std::f64::consts::SQRT_2),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jacobian_gives_inverse_information() {
        let info = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let v = asymptotic_covariance(&info, &DMatrix::zeros(2, 2)).unwrap();
        assert!((v * &info - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn unit_jacobian_is_singular() {
        let info = DMatrix::identity(2, 2);
        let err = asymptotic_covariance(&info, &DMatrix::identity(2, 2));
        assert!(matches!(err, Err(VfemError::SingularSystem(_))));
    }

    #[test]
    fn stars_mark_large_z() {
        let rows = wald_rows(
            &["a".into(), "b".into()],
            &DVector::from_vec(vec![2.0, 1.0]),
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0])),
        );
        assert!(rows[0].significant() && !rows[1].significant());
        assert!((rows[0].p_value - 0.0455).abs() < 1e-4);
    }
}
