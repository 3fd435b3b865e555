//! Standard errors at a converged fit: sketched information, SEM Jacobian,
//! and the resulting asymptotic covariance.

mod covariance;
mod information;
mod sem;
mod sketch;

pub use covariance::{asymptotic_covariance, beta_block, wald_rows, CoefficientRow, Z_CRIT};
pub use information::{
    beta_information, conditional_covariance_total, information_matrix, repair_information, INFORMATION_FLOOR,
};
pub use sem::{sem_jacobian, EmMap, PooledEmMap, SemConfig};
pub use sketch::{exact_statistics, sketch_statistics, SketchConfig, SufficientStatistics};

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Result, VfemError};
use crate::linalg::spectral_radius;
use crate::model::{e_step, ModelParameters, VerticalDataset};
use crate::protocol::{Federation, FederationConfig, Traffic, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceScope {
    /// Every parameter, so nuisance uncertainty propagates into β.
    #[default]
    Full,
    /// μ, Σ and σ² held at θ̂.
    BetaOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticsSource {
    #[default]
    Sketch,
    /// Cross-products from pooled data; for validation only.
    Exact,
}

#[derive(Debug, Clone, Default)]
pub struct InferenceConfig {
    pub scope: InferenceScope,
    pub statistics: StatisticsSource,
    pub sketch: SketchConfig,
    pub sem: SemConfig,
    pub engine: Engine,
    pub federation: FederationConfig,
}

#[derive(Debug, Clone)]
pub struct InferenceReport {
    pub scope: InferenceScope,
    pub information: DMatrix<f64>,
    pub information_repaired: bool,
    pub gamma: DMatrix<f64>,
    pub gamma_spectral_radius: f64,
    pub covariance: DMatrix<f64>,
    /// Symmetrized, PSD-repaired β-block of the covariance.
    pub beta_covariance: DMatrix<f64>,
    pub covariance_repaired: bool,
    pub coefficients: Vec<CoefficientRow>,
    pub sketch: Option<(usize, usize)>,
    pub traffic: Option<Traffic>,
}

impl InferenceReport {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.coefficients.iter().map(|r| r.se).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,estimate,se,z,p_value,significant\n");
        for r in &self.coefficients {
            let _ = writeln!(out, "{},{:e},{:e},{:e},{:e},{}", r.name, r.estimate, r.se, r.z, r.p_value, r.significant());
        }
        out
    }

    /// Estimate (SE) with a star at 5%, one row per coefficient.
    pub fn to_table(&self) -> String {
        let width = self.coefficients.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>24}  {:>9}  {:>9}\n", "name", "estimate (se)", "z", "p");
        for r in &self.coefficients {
            let star = if r.significant() { "*" } else { " " };
            let cell = format!("{:.4} ({:.4}){star}", r.estimate, r.se);
            let _ = writeln!(out, "{:<width$}  {:>24}  {:>9.3}  {:>9.4}", r.name, cell, r.z, r.p_value);
        }
        out
    }
}

/// Inference at a converged θ̂.
pub fn infer(data: &VerticalDataset, theta_hat: &ModelParameters, cfg: &InferenceConfig) -> Result<InferenceReport> {
    theta_hat.validate(data.layout())?;
    match cfg.engine {
        Engine::Federated => infer_federated(data, theta_hat, cfg),
        Engine::Oracle => infer_pooled(data, theta_hat, cfg),
    }
}

fn coordinates(scope: InferenceScope, data: &VerticalDataset) -> Vec<usize> {
    match scope {
        InferenceScope::Full => (0..ModelParameters::dim(data.layout())).collect(),
        InferenceScope::BetaOnly => (0..data.p()).collect(),
    }
}

fn information_for(
    scope: InferenceScope,
    stats: &SufficientStatistics,
    theta: &ModelParameters,
    cond: &DMatrix<f64>,
    data: &VerticalDataset,
) -> Result<DMatrix<f64>> {
    match scope {
        InferenceScope::Full => information_matrix(stats, theta, cond, data.n(), data.layout()),
        InferenceScope::BetaOnly => Ok(beta_information(stats, cond, theta.sigma2)),
    }
}

fn finish_report(
    scope: InferenceScope,
    theta: &ModelParameters,
    data: &VerticalDataset,
    raw_info: DMatrix<f64>,
    gamma: DMatrix<f64>,
    sketch: Option<(usize, usize)>,
) -> Result<InferenceReport> {
    let (information, information_repaired) = repair_information(&raw_info);
    let covariance = asymptotic_covariance(&information, &gamma)?;
    let p = data.p();
    let (beta_covariance, covariance_repaired) = beta_block(&covariance, p);
    let names = ModelParameters::coordinate_names(data.layout());
    let coefficients = wald_rows(&names[..p], &theta.beta, &beta_covariance);
    if coefficients.iter().any(|r| !(r.se.is_finite() && r.se > 0.0)) {
        return Err(VfemError::SingularSystem("a standard error is not positive".into()));
    }
    Ok(InferenceReport {
        scope,
        gamma_spectral_radius: spectral_radius(&gamma),
        information,
        information_repaired,
        gamma,
        covariance,
        beta_covariance,
        covariance_repaired,
        coefficients,
        sketch,
        traffic: None,
    })
}

fn infer_federated(data: &VerticalDataset, theta_hat: &ModelParameters, cfg: &InferenceConfig) -> Result<InferenceReport> {
    let mut fed = Federation::launch(data, theta_hat, &cfg.federation)?;
    fed.iterate(UpdateRule::Hold)?;
    let theta = fed.parameters()?;
    let estep = fed
        .server()
        .last_estep()
        .cloned()
        .ok_or_else(|| VfemError::ProtocolDesync("no E-step at θ̂".into()))?;
    let stats = match cfg.statistics {
        StatisticsSource::Sketch => sketch_statistics(&mut fed, &cfg.sketch, cfg.federation.seed)?,
        StatisticsSource::Exact => exact_statistics(&e_step(&theta, data)?, &theta.mu),
    };
    let mask = fed.server().mask().clone();
    let cond = conditional_covariance_total(data.layout(), &mask, &theta.sigma, &estep.coupling, &estep.d);
    let info = information_for(cfg.scope, &stats, &theta, &cond, data)?;
    let coords = coordinates(cfg.scope, data);
    let gamma = sem_jacobian(&mut fed, &theta.to_vector(), &coords, &cfg.sem)?;
    let outcome = fed.finish()?;
    let mut report = finish_report(cfg.scope, &theta, data, info, gamma, stats.sketch)?;
    report.traffic = Some(outcome.traffic);
    Ok(report)
}

fn infer_pooled(data: &VerticalDataset, theta: &ModelParameters, cfg: &InferenceConfig) -> Result<InferenceReport> {
    let pc = e_step(theta, data)?;
    let stats = exact_statistics(&pc, &theta.mu);
    let cond = pc.conditional_covariance_sum();
    let info = information_for(cfg.scope, &stats, theta, &cond, data)?;
    let coords = coordinates(cfg.scope, data);
    let mut map = PooledEmMap { data, theta: theta.to_vector() };
    let gamma = sem_jacobian(&mut map, &theta.to_vector(), &coords, &cfg.sem)?;
    finish_report(cfg.scope, theta, data, info, gamma, None)
}
