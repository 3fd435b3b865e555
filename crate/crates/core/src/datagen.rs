//! Seeded synthetic vertical datasets with block missingness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfemError};
use crate::model::{BlockLayout, MissingMask, ModelParameters, VerticalDataset};
use crate::seed;

const MAX_MASK_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    #[default]
    Mcar,
    /// Missing with probability logistic in standardized y.
    MarOnY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CovarianceSpec {
    Identity,
    Equicorrelated { rho: f64 },
    Matrices { values: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MeanSpec {
    Zero,
    Values { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum BetaSpec {
    /// +m, −m, +m, … over the pooled coordinates.
    Alternating { magnitude: f64 },
    Values { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n: usize,
    pub dims: Vec<usize>,
    pub mean: MeanSpec,
    pub covariance: CovarianceSpec,
    pub beta: BetaSpec,
    pub sigma2: f64,
    pub missing_rates: Vec<f64>,
    #[serde(default)]
    pub mechanism: Mechanism,
    #[serde(default = "default_min_complete")]
    pub min_complete: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_complete() -> usize {
    2
}

impl GenConfig {
    /// n = 800, three clients of two features, ρ = 0.3 everywhere.
    pub fn standard() -> Self {
        Self {
            n: 800,
            dims: vec![2, 2, 2],
            mean: MeanSpec::Zero,
            covariance: CovarianceSpec::Equicorrelated { rho: 0.3 },
            beta: BetaSpec::Alternating { magnitude: 1.0 },
            sigma2: 1.0,
            missing_rates: vec![0.3; 3],
            mechanism: Mechanism::Mcar,
            min_complete: 2,
            seed: 0,
        }
    }

    /// Five clients shaped like the SME registry: 12, 3, 6, 9 and 5 features.
    pub fn smes_like() -> Self {
        Self {
            n: 100_000,
            dims: vec![12, 3, 6, 9, 5],
            missing_rates: vec![0.5365, 0.8761, 0.9305, 0.0091, 0.9328],
            ..Self::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "smes-like" => Ok(Self::smes_like()),
            other => Err(VfemError::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_rate(mut self, rate: f64) -> Self {
        self.missing_rates = vec![rate; self.dims.len()];
        self
    }

    pub fn layout(&self) -> Result<BlockLayout> {
        BlockLayout::new(self.dims.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VfemError::InvalidConfig(msg));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        let layout = self.layout()?;
        let kk = layout.num_clients();
        if self.missing_rates.len() != kk {
            return bad(format!("{} missing rates for {kk} clients", self.missing_rates.len()));
        }
        if let Some(r) = self.missing_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("missing rate {r} outside [0, 1)"));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be positive".into());
        }
        if self.min_complete > self.n {
            return bad("min_complete exceeds n".into());
        }
        if let MeanSpec::Values { values } = &self.mean {
            if values.len() != kk || values.iter().zip(layout.dims()).any(|(v, &d)| v.len() != d) {
                return bad("mean values do not match the block layout".into());
            }
        }
        if let BetaSpec::Values { values } = &self.beta {
            if values.len() != layout.total() {
                return bad(format!("β has {} entries, expected {}", values.len(), layout.total()));
            }
        }
        if let CovarianceSpec::Equicorrelated { rho } = self.covariance {
            // Positive definite for every block size in use.
            let pmax = *layout.dims().iter().max().unwrap_or(&1) as f64;
            if !(rho < 1.0 && rho > -1.0 / (pmax - 1.0).max(1.0)) {
                return bad(format!("equicorrelation {rho} is not positive definite"));
            }
        }
        for k in 0..kk {
            let s = self.covariance_block(k, layout.dim(k))?;
            if s.clone().cholesky().is_none() {
                return bad(format!("covariance of client {} is not positive definite", k + 1));
            }
        }
        Ok(())
    }

    fn covariance_block(&self, k: usize, d: usize) -> Result<DMatrix<f64>> {
        Ok(match &self.covariance {
            CovarianceSpec::Identity => DMatrix::identity(d, d),
            CovarianceSpec::Equicorrelated { rho } => {
                DMatrix::from_fn(d, d, |a, b| if a == b { 1.0 } else { *rho })
            }
            CovarianceSpec::Matrices { values } => {
                let rows = values.get(k).ok_or_else(|| VfemError::InvalidConfig("too few covariance blocks".into()))?;
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(VfemError::InvalidConfig(format!("covariance of client {} is not {d}×{d}", k + 1)));
                }
                DMatrix::from_fn(d, d, |a, b| rows[a][b])
            }
        })
    }

    /// θ* implied by the configuration.
    pub fn truth(&self) -> Result<ModelParameters> {
        self.validate()?;
        let layout = self.layout()?;
        let p = layout.total();
        let beta = match &self.beta {
            BetaSpec::Alternating { magnitude } => {
                DVector::from_fn(p, |j, _| if j % 2 == 0 { *magnitude } else { -magnitude })
            }
            BetaSpec::Values { values } => DVector::from_column_slice(values),
        };
        let mu = (0..layout.num_clients())
            .map(|k| match &self.mean {
                MeanSpec::Zero => DVector::zeros(layout.dim(k)),
                MeanSpec::Values { values } => DVector::from_column_slice(&values[k]),
            })
            .collect();
        let sigma = (0..layout.num_clients()).map(|k| self.covariance_block(k, layout.dim(k))).collect::<Result<_>>()?;
        Ok(ModelParameters::new(beta, mu, sigma, self.sigma2))
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub data: VerticalDataset,
    pub truth: ModelParameters,
    /// The draws before masking.
    pub full_x: DMatrix<f64>,
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Intercept `a` with mean over i of logistic(a + z_i) equal to `rate`.
fn calibrate_intercept(z: &[f64], rate: f64) -> f64 {
    let mean_at = |a: f64| z.iter().map(|&zi| logistic(a + zi)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draw X, ε and the block mask. The mask uses its own uniform stream, so
/// raising one client's rate only adds masked rows for that client.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let truth = cfg.truth()?;
    let layout = cfg.layout()?;
    let n = cfg.n;
    let p = layout.total();
    let kk = layout.num_clients();

    let mut x = DMatrix::zeros(n, p);
    for k in 0..kk {
        let d = layout.dim(k);
        let chol = truth.sigma[k].clone().cholesky().expect("validated").l();
        let mut rng = seed::rng(cfg.seed, &[1, k as u64]);
        let off = layout.offset(k);
        for i in 0..n {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let row = &truth.mu[k] + &chol * z;
            for a in 0..d {
                x[(i, off + a)] = row[a];
            }
        }
    }
    let mut rng = seed::rng(cfg.seed, &[2]);
    let noise_sd = cfg.sigma2.sqrt();
    let y = DVector::from_fn(n, |i, _| {
        let eps: f64 = rng.sample(StandardNormal);
        x.row(i).transpose().dot(&truth.beta) + noise_sd * eps
    });

    let thresholds: Vec<Vec<f64>> = match cfg.mechanism {
        Mechanism::Mcar => cfg.missing_rates.iter().map(|&r| vec![r; n]).collect(),
        Mechanism::MarOnY => {
            let mean = y.mean();
            let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(f64::MIN_POSITIVE);
            let z: Vec<f64> = y.iter().map(|v| (v - mean) / sd).collect();
            cfg.missing_rates
                .iter()
                .map(|&r| {
                    if r == 0.0 {
                        vec![0.0; n]
                    } else {
                        let a = calibrate_intercept(&z, r);
                        z.iter().map(|&zi| logistic(a + zi)).collect()
                    }
                })
                .collect()
        }
    };

    for attempt in 0..MAX_MASK_ATTEMPTS {
        let mut rng = seed::rng(cfg.seed, &[3, attempt as u64]);
        let mut mask = MissingMask::new(n, kk);
        for i in 0..n {
            for k in 0..kk {
                let u: f64 = rng.random();
                mask.set(i, k, u < thresholds[k][i]);
            }
        }
        let enough = (0..kk).all(|k| n - mask.missing_count(k) >= cfg.min_complete);
        if enough {
            let data = VerticalDataset::from_pooled(layout.clone(), &x, y.clone(), &mask)?;
            return Ok(Generated { data, truth, full_x: x });
        }
    }
    Err(VfemError::MaskRetryExhausted { attempts: MAX_MASK_ATTEMPTS })
}
