//! Single-client, complete-case and mean-imputation regressions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::federated_ols;
use crate::error::{Result, VfemError};
use crate::model::{ols, VerticalDataset};
use crate::protocol::FederationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// Client 1's own block on its observed rows.
    Single,
    CompleteCase,
    MeanImpute,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Single, BaselineKind::CompleteCase, BaselineKind::MeanImpute];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Single => "single",
            BaselineKind::CompleteCase => "complete-case",
            BaselineKind::MeanImpute => "mean-impute",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub kind: BaselineKind,
    /// `None` for coefficients the method does not estimate.
    pub beta: Vec<Option<f64>>,
    pub se: Vec<Option<f64>>,
    pub rows_used: usize,
    pub r2: f64,
    pub adjusted_r2: f64,
}

impl BaselineFit {
    /// Coefficients with absent entries set to zero.
    pub fn beta_filled(&self) -> DVector<f64> {
        DVector::from_iterator(self.beta.len(), self.beta.iter().map(|b| b.unwrap_or(0.0)))
    }

    pub fn estimated(&self) -> usize {
        self.beta.iter().filter(|b| b.is_some()).count()
    }
}

/// OLS summaries at known coefficients. The residual variance is the ML
/// estimate RSS/n, the same convention the EM information uses.
pub fn ols_summary(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> Result<(Vec<f64>, f64, f64)> {
    let (n, q) = x.shape();
    let resid = y - x * beta;
    let rss = resid.norm_squared();
    let mean = y.mean();
    let tss = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let s2 = rss / n as f64;
    let xtx_inv = (x.transpose() * x)
        .try_inverse()
        .ok_or_else(|| VfemError::SingularSystem("baseline design is rank deficient".into()))?;
    let se = (0..q).map(|j| (s2 * xtx_inv[(j, j)]).sqrt()).collect();
    let r2 = 1.0 - rss / tss;
    let adj = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - q as f64 - 1.0);
    Ok((se, r2, adj))
}

/// Fit one baseline. Complete-case and mean-imputation solve their normal
/// equations through the protocol; the summaries use the pooled design.
pub fn run_baseline(kind: BaselineKind, data: &VerticalDataset, fed: &FederationConfig) -> Result<BaselineFit> {
    let p = data.p();
    let layout = data.layout();
    match kind {
        BaselineKind::Single => {
            let client = data.client(0);
            let rows: Vec<usize> = client.observed_rows().collect();
            let p1 = layout.dim(0);
            if rows.len() < p1 + 2 {
                return Err(VfemError::InsufficientCompleteCases { needed: p1 + 2, found: rows.len() });
            }
            let x = DMatrix::from_fn(rows.len(), p1, |r, j| client.row(rows[r])[j]);
            let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| data.y()[i]));
            let b = ols(&x, &y)?;
            let (se, r2, adjusted_r2) = ols_summary(&x, &y, &b)?;
            let mut beta = vec![None; p];
            let mut ses = vec![None; p];
            for j in 0..p1 {
                beta[j] = Some(b[j]);
                ses[j] = Some(se[j]);
            }
            Ok(BaselineFit { kind, beta, se: ses, rows_used: rows.len(), r2, adjusted_r2 })
        }
        BaselineKind::CompleteCase | BaselineKind::MeanImpute => {
            let design = if kind == BaselineKind::CompleteCase {
                let rows = data.complete_rows();
                if rows.len() < p + 2 {
                    return Err(VfemError::InsufficientCompleteCases { needed: p + 2, found: rows.len() });
                }
                data.subset(&rows)?
            } else {
                data.mean_imputed()?
            };
            let b = federated_ols(&design, fed)?;
            let x = design.pooled_with_nan();
            let (se, r2, adjusted_r2) = ols_summary(&x, design.y(), &b)?;
            Ok(BaselineFit {
                kind,
                beta: b.iter().map(|v| Some(*v)).collect(),
                se: se.into_iter().map(Some).collect(),
                rows_used: design.n(),
                r2,
                adjusted_r2,
            })
        }
    }
}
