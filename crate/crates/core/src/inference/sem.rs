//! Jacobian of the EM map by numerical differentiation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfemError};
use crate::model::{closed_form_m_step, ModelParameters, VerticalDataset};
use crate::protocol::Federation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemConfig {
    /// Coordinate j moves by `rel_step · (1 + |θ̂_j|)`.
    pub rel_step: f64,
    /// Largest ‖F(θ̂) − θ̂‖∞ accepted as a fixed point.
    pub fixed_point_tol: f64,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self { rel_step: 1e-4, fixed_point_tol: 1e-6 }
    }
}

/// One application of the closed-form EM map, optionally from a shifted θ̂.
pub trait EmMap {
    fn apply(&mut self, shift: Option<(usize, f64)>) -> Result<DVector<f64>>;
}

impl EmMap for Federation {
    fn apply(&mut self, shift: Option<(usize, f64)>) -> Result<DVector<f64>> {
        Ok(self.em_map(shift)?.to_vector())
    }
}

/// The same map on pooled data.
pub struct PooledEmMap<'a> {
    pub data: &'a VerticalDataset,
    pub theta: DVector<f64>,
}

impl EmMap for PooledEmMap<'_> {
    fn apply(&mut self, shift: Option<(usize, f64)>) -> Result<DVector<f64>> {
        let mut v = self.theta.clone();
        if let Some((j, h)) = shift {
            v[j] += h;
        }
        let theta = ModelParameters::from_vector(&v, self.data.layout())?;
        Ok(closed_form_m_step(&theta, self.data)?.to_vector())
    }
}

/// Γ restricted to `coords`: entry (a, b) is ∂F_{coords[b]} / ∂θ_{coords[a]},
/// by central differences.
pub fn sem_jacobian(
    map: &mut impl EmMap,
    theta_hat: &DVector<f64>,
    coords: &[usize],
    cfg: &SemConfig,
) -> Result<DMatrix<f64>> {
    let base = map.apply(None)?;
    let residual = (&base - theta_hat).amax();
    if !(residual <= cfg.fixed_point_tol) {
        return Err(VfemError::NotAFixedPoint { residual });
    }
    let q = coords.len();
    let mut gamma = DMatrix::zeros(q, q);
    for (a, &i) in coords.iter().enumerate() {
        let h = cfg.rel_step * (1.0 + theta_hat[i].abs());
        let up = map.apply(Some((i, h)))?;
        let down = map.apply(Some((i, -h)))?;
        for (b, &j) in coords.iter().enumerate() {
            gamma[(a, b)] = (up[j] - down[j]) / (2.0 * h);
        }
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        fixed: DVector<f64>,
        rate: DMatrix<f64>,
    }

    impl EmMap for Linear {
        fn apply(&mut self, shift: Option<(usize, f64)>) -> Result<DVector<f64>> {
            let mut d = DVector::zeros(self.fixed.len());
            if let Some((j, h)) = shift {
                d[j] = h;
            }
            Ok(&self.fixed + self.rate.transpose() * d)
        }
    }

    #[test]
    fn recovers_a_linear_map() {
        let rate = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let fixed = DVector::from_vec(vec![1.0, 2.0]);
        let mut map = Linear { fixed: fixed.clone(), rate: rate.clone() };
        let g = sem_jacobian(&mut map, &fixed, &[0, 1], &SemConfig::default()).unwrap();
        assert!((g - rate).norm() < 1e-10);
    }

    #[test]
    fn rejects_points_that_are_not_fixed() {
        let mut map = Linear { fixed: DVector::from_vec(vec![1.0]), rate: DMatrix::zeros(1, 1) };
        let err = sem_jacobian(&mut map, &DVector::from_vec(vec![1.1]), &[0], &SemConfig::default());
        assert!(matches!(err, Err(VfemError::NotAFixedPoint { .. })));
    }
}
