//! Seeded replications comparing VFEM with the baselines.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{ols_summary, run_baseline, BaselineKind};
use crate::datagen::{generate, GenConfig, Generated};
use crate::engine::{fit, predict, FitConfig};
use crate::error::{Result, VfemError};
use crate::inference::{infer, InferenceConfig, Z_CRIT};
use crate::model::{ols, VerticalDataset};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Vfem,
    /// OLS on the training rows before masking. Needs the hidden draws, so
    /// it exists only as a reference in simulation.
    Ols,
    Single,
    CompleteCase,
    MeanImpute,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vfem => "vfem",
            Method::Ols => "ols",
            Method::Single => BaselineKind::Single.name(),
            Method::CompleteCase => BaselineKind::CompleteCase.name(),
            Method::MeanImpute => BaselineKind::MeanImpute.name(),
        }
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            Method::Single => Some(BaselineKind::Single),
            Method::CompleteCase => Some(BaselineKind::CompleteCase),
            Method::MeanImpute => Some(BaselineKind::MeanImpute),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = VfemError;
    fn from_str(s: &str) -> Result<Self> {
        [Method::Vfem, Method::Ols, Method::Single, Method::CompleteCase, Method::MeanImpute]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| VfemError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloSpec {
    pub replicates: usize,
    pub gen: GenConfig,
    pub methods: Vec<Method>,
    pub fit: FitConfig,
    /// VFEM standard errors; `None` skips inference and coverage.
    pub inference: Option<InferenceConfig>,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl MonteCarloSpec {
    pub fn new(replicates: usize, gen: GenConfig, methods: Vec<Method>) -> Self {
        let seed = gen.seed;
        Self { replicates, gen, methods, fit: FitConfig::default(), inference: None, seed, workers: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(VfemError::InvalidConfig("at least one replicate is required".into()));
        }
        if self.methods.is_empty() {
            return Err(VfemError::InvalidConfig("no methods selected".into()));
        }
        self.gen.validate()?;
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub beta: Vec<Option<f64>>,
    pub se: Option<Vec<Option<f64>>>,
    /// Held-out MSE; absent when no test rows exist.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Ok(Estimate),
    /// The method's data requirement is not met, as with starved CC.
    NotApplicable { reason: String },
    Failed { kind: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
    pub complete_rows: usize,
    pub outcomes: Vec<(Method, Outcome)>,
}

impl Replicate {
    pub fn outcome(&self, method: Method) -> Option<&Outcome> {
        self.outcomes.iter().find(|(m, _)| *m == method).map(|(_, o)| o)
    }

    pub fn failed(&self) -> bool {
        self.outcomes.iter().any(|(_, o)| matches!(o, Outcome::Failed { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub succeeded: usize,
    pub not_applicable: usize,
    pub failed: usize,
    pub bias: Vec<Option<f64>>,
    pub sd: Vec<Option<f64>>,
    pub rmse: Vec<Option<f64>>,
    pub coverage: Vec<Option<f64>>,
    pub prediction_mse: Option<f64>,
}

impl MethodSummary {
    /// Coverage pooled over every coefficient and replicate with an SE.
    pub fn mean_coverage(&self) -> Option<f64> {
        mean(self.coverage.iter().flatten().copied())
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        mean(self.rmse.iter().flatten().copied())
    }

    pub fn mean_abs_bias(&self) -> Option<f64> {
        mean(self.bias.iter().flatten().map(|b| b.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub replicates: usize,
    pub failed_replicates: usize,
    pub truth: Vec<f64>,
    pub names: Vec<String>,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<Replicate>,
}

impl MonteCarloSummary {
    pub fn method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == method)
    }

    /// One row per method.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<14} {:>4} {:>4} {:>6} {:>10} {:>10} {:>9} {:>10}\n",
            "method", "ok", "n/a", "failed", "mean|bias|", "mean rmse", "coverage", "pred mse"
        );
        for s in &self.methods {
            let _ = writeln!(
                out,
                "{:<14} {:>4} {:>4} {:>6} {:>10} {:>10} {:>9} {:>10}",
                s.method.name(),
                s.succeeded,
                s.not_applicable,
                s.failed,
                cell(s.mean_abs_bias()),
                cell(s.mean_rmse()),
                cell(s.mean_coverage()),
                cell(s.prediction_mse),
            );
        }
        out
    }

    /// Per-coefficient rows for external plotting.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
        let mut out = String::from("method,coefficient,truth,bias,sd,rmse,coverage\n");
        for s in &self.methods {
            for (j, name) in self.names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{:e},{},{},{},{}",
                    s.method.name(),
                    name,
                    self.truth[j],
                    cell(s.bias[j]),
                    cell(s.sd[j]),
                    cell(s.rmse[j]),
                    cell(s.coverage[j])
                );
            }
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Half of the fully observed rows go to the test set.
pub fn split_rows(data: &VerticalDataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut complete = data.complete_rows();
    complete.shuffle(&mut seed::rng(seed, &[0x5B11]));
    let test_n = complete.len() / 2;
    let mut test = complete[..test_n].to_vec();
    test.sort_unstable();
    let mut in_test = vec![false; data.n()];
    for &i in &test {
        in_test[i] = true;
    }
    let train = (0..data.n()).filter(|&i| !in_test[i]).collect();
    (train, test)
}

fn failed(e: VfemError) -> Outcome {
    match e {
        VfemError::InsufficientCompleteCases { .. } => Outcome::NotApplicable { reason: e.to_string() },
        e => Outcome::Failed { kind: e.kind().to_string(), message: e.to_string() },
    }
}

fn test_mse(beta: &DVector<f64>, test: Option<&VerticalDataset>) -> Option<f64> {
    test.map(|t| {
        let x = t.pooled_with_nan();
        (t.y() - x * beta).norm_squared() / t.n() as f64
    })
}

fn run_vfem(spec: &MonteCarloSpec, train: &VerticalDataset, test: Option<&VerticalDataset>, rep_seed: u64) -> Result<Estimate> {
    let mut cfg = spec.fit.clone();
    cfg.federation.seed = seed::derive(rep_seed, &[0xFED]);
    let r = fit(train, &cfg)?;
    let se = match &spec.inference {
        Some(inf) => {
            let mut inf = inf.clone();
            inf.federation.seed = seed::derive(rep_seed, &[0x1F]);
            inf.engine = cfg.engine;
            let report = infer(train, &r.theta, &inf)?;
            Some(report.standard_errors().into_iter().map(Some).collect())
        }
        None => None,
    };
    Ok(Estimate {
        beta: r.theta.beta.iter().map(|b| Some(*b)).collect(),
        se,
        mse: test.map(|t| predict(&r.theta, t).mse),
    })
}

fn run_ols(g: &Generated, rows: &[usize], test: Option<&VerticalDataset>) -> Result<Estimate> {
    let x = DMatrix::from_fn(rows.len(), g.full_x.ncols(), |r, j| g.full_x[(rows[r], j)]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| g.data.y()[i]));
    let b = ols(&x, &y)?;
    let (se, _, _) = ols_summary(&x, &y, &b)?;
    Ok(Estimate {
        beta: b.iter().map(|v| Some(*v)).collect(),
        se: Some(se.into_iter().map(Some).collect()),
        mse: test_mse(&b, test),
    })
}

pub fn run_replicate(spec: &MonteCarloSpec, index: usize) -> Replicate {
    let rep_seed = seed::derive(spec.seed, &[0x4D43, index as u64]);
    let mut rec = Replicate { index, seed: rep_seed, train_rows: 0, test_rows: 0, complete_rows: 0, outcomes: Vec::new() };
    let g = match generate(&spec.gen.clone().with_seed(rep_seed)) {
        Ok(g) => g,
        Err(e) => {
            let o = failed(e);
            rec.outcomes = spec.methods.iter().map(|&m| (m, o.clone())).collect();
            return rec;
        }
    };
    let (train_idx, test_idx) = split_rows(&g.data, rep_seed);
    rec.complete_rows = g.data.complete_rows().len();
    rec.train_rows = train_idx.len();
    rec.test_rows = test_idx.len();
    let split = g.data.subset(&train_idx).and_then(|tr| {
        let te = if test_idx.is_empty() { None } else { Some(g.data.subset(&test_idx)?) };
        Ok((tr, te))
    });
    let (train, test) = match split {
        Ok(s) => s,
        Err(e) => {
            let o = failed(e);
            rec.outcomes = spec.methods.iter().map(|&m| (m, o.clone())).collect();
            return rec;
        }
    };
    let test = test.as_ref();
    for &m in &spec.methods {
        let est = match m {
            Method::Vfem => run_vfem(spec, &train, test, rep_seed),
            Method::Ols => run_ols(&g, &train_idx, test),
            other => {
                let kind = other.baseline().expect("baseline method");
                let mut fed = spec.fit.federation.clone();
                fed.seed = seed::derive(rep_seed, &[0xBA5E]);
                run_baseline(kind, &train, &fed).map(|b| Estimate {
                    mse: test_mse(&b.beta_filled(), test),
                    beta: b.beta,
                    se: Some(b.se),
                })
            }
        };
        rec.outcomes.push((m, est.map_or_else(failed, Outcome::Ok)));
    }
    rec
}

fn summarize(method: Method, records: &[Replicate], truth: &DVector<f64>) -> MethodSummary {
    let p = truth.len();
    let mut s = MethodSummary {
        method,
        succeeded: 0,
        not_applicable: 0,
        failed: 0,
        bias: vec![None; p],
        sd: vec![None; p],
        rmse: vec![None; p],
        coverage: vec![None; p],
        prediction_mse: None,
    };
    let mut ests = Vec::new();
    for r in records {
        match r.outcome(method) {
            Some(Outcome::Ok(e)) => ests.push(e),
            Some(Outcome::NotApplicable { .. }) => s.not_applicable += 1,
            Some(Outcome::Failed { .. }) | None => s.failed += 1,
        }
    }
    s.succeeded = ests.len();
    for j in 0..p {
        let vals: Vec<f64> = ests.iter().filter_map(|e| e.beta[j]).collect();
        if vals.is_empty() {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        s.bias[j] = Some(m - truth[j]);
        s.sd[j] = Some(if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        } else {
            0.0
        });
        s.rmse[j] = mean(vals.iter().map(|v| (v - truth[j]).powi(2))).map(f64::sqrt);
        s.coverage[j] = mean(ests.iter().filter_map(|e| {
            let b = e.beta[j]?;
            let se = e.se.as_ref()?[j]?;
            Some(if (b - truth[j]).abs() <= Z_CRIT * se { 1.0 } else { 0.0 })
        }));
    }
    s.prediction_mse = mean(ests.iter().filter_map(|e| e.mse));
    s
}

/// Run every replicate and aggregate in replicate order. A replicate
/// fails when any method errors for a reason other than starved data.
pub fn monte_carlo(spec: &MonteCarloSpec) -> Result<MonteCarloSummary> {
    spec.validate()?;
    let workers = match spec.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(spec.replicates);
    let mut slots: Vec<Option<Replicate>> = vec![None; spec.replicates];
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || {
                    (w..spec.replicates).step_by(workers).map(|r| run_replicate(spec, r)).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for rec in h.join().expect("replicate worker panicked") {
                let i = rec.index;
                slots[i] = Some(rec);
            }
        }
    });
    let records: Vec<Replicate> = slots.into_iter().map(|r| r.expect("every replicate ran")).collect();
    let failed_replicates = records.iter().filter(|r| r.failed()).count();
    if failed_replicates * 5 > spec.replicates {
        return Err(VfemError::HarnessFailure { failed: failed_replicates, total: spec.replicates });
    }
    let truth = spec.gen.truth()?;
    let methods = spec.methods.iter().map(|&m| summarize(m, &records, &truth.beta)).collect();
    Ok(MonteCarloSummary {
        replicates: spec.replicates,
        failed_replicates,
        truth: truth.beta.iter().copied().collect(),
        names: crate::model::ModelParameters::coordinate_names(&spec.gen.layout()?)[..truth.beta.len()].to_vec(),
        methods,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_half_of_the_complete_rows() {
        let g = generate(&GenConfig::standard().with_seed(3)).unwrap();
        let (train, test) = split_rows(&g.data, 9);
        let complete = g.data.complete_rows().len();
        assert_eq!(test.len(), complete / 2);
        assert_eq!(train.len() + test.len(), g.data.n());
        assert!(test.iter().all(|&i| !g.data.mask().any_missing(i)));
    }

    #[test]
    fn summary_statistics_by_hand() {
        let rec = |i, b: f64, se: f64| Replicate {
            index: i,
            seed: 0,
            train_rows: 0,
            test_rows: 0,
            complete_rows: 0,
            outcomes: vec![(Method::Ols, Outcome::Ok(Estimate { beta: vec![Some(b)], se: Some(vec![Some(se)]), mse: Some(b) }))],
        };
        let records = vec![rec(0, 1.0, 0.1), rec(1, 3.0, 1.0)];
        let s = summarize(Method::Ols, &records, &DVector::from_element(1, 1.5));
        assert!((s.bias[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((s.sd[0].unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.rmse[0].unwrap() - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.coverage[0], Some(0.5));
        assert_eq!(s.prediction_mse, Some(2.0));
    }
}
