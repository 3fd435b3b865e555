//! The fit loop: initialization, first-order EM iterations, convergence.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VfemError};
use crate::linalg::{repair_psd, symmetric_eigenvalues, EIGEN_FLOOR};
use crate::model::{closed_form_m_step, observed_loss, e_step, ols, ModelParameters, VerticalDataset};
use crate::protocol::{Federation, FederationConfig, Traffic, UpdateRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Engine {
    /// First-order EM run through the client/coordinator protocol.
    #[default]
    Federated,
    /// Closed-form EM on pooled data.
    Oracle,
}

impl std::str::FromStr for Engine {
    type Err = VfemError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "federated" => Ok(Self::Federated),
            "oracle" | "centralized" => Ok(Self::Oracle),
            other => Err(VfemError::InvalidConfig(format!("unknown engine {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitStrategy {
    #[default]
    Zeros,
    CompleteCaseOls,
    User(DVector<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LearningRate {
    /// 2 / (λ_max + λ_min) of the initial block-diagonal covariance.
    #[default]
    Adaptive,
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iters: usize,
    pub tolerance: f64,
    pub beta_tolerance: f64,
    pub learning_rate: LearningRate,
    pub init: InitStrategy,
    pub engine: Engine,
    pub federation: FederationConfig,
    /// Ask clients for β after every iteration.
    pub track_beta: bool,
    pub guard_window: usize,
    pub max_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tolerance: 1e-8,
            beta_tolerance: 1e-10,
            learning_rate: LearningRate::Adaptive,
            init: InitStrategy::Zeros,
            engine: Engine::Federated,
            federation: FederationConfig::default(),
            track_beta: false,
            guard_window: 10,
            max_halvings: 30,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(VfemError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(VfemError::InvalidConfig("tolerance must be positive".into()));
        }
        if let LearningRate::Constant(eta) = self.learning_rate {
            if !(eta > 0.0) {
                return Err(VfemError::InvalidConfig("learning rate must be positive".into()));
            }
        }
        self.federation.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ModelParameters,
    /// ℓ per iteration.
    pub loss_trace: Vec<f64>,
    /// ‖β^(t+1) − β^(t)‖₂ per iteration.
    pub step_trace: Vec<f64>,
    /// β^(t+1) per iteration, when tracked.
    pub beta_trace: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub engine: Engine,
    pub eta: f64,
    pub halvings: usize,
    pub traffic: Option<Traffic>,
}

/// Starting values: σ² from `y`, (μ_k, Σ_k) from each client's observed rows.
pub fn initialize(data: &VerticalDataset, cfg: &FitConfig) -> Result<ModelParameters> {
    let n = data.n();
    if n < 2 {
        return Err(VfemError::InsufficientData(format!("{n} samples")));
    }
    let y = data.y();
    let mean = y.mean();
    let sigma2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(sigma2 > 0.0) {
        return Err(VfemError::DegenerateVariance("the response is constant".into()));
    }
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for c in data.clients() {
        let (m, s) = c.observed_moments()?;
        mu.push(m);
        sigma.push(repair_psd(&s, EIGEN_FLOOR).0);
    }
    let p = data.p();
    let beta = match &cfg.init {
        InitStrategy::Zeros => DVector::zeros(p),
        InitStrategy::User(b) => {
            if b.len() != p {
                return Err(VfemError::InvalidInput(format!("initial β has length {}, expected {p}", b.len())));
            }
            b.clone()
        }
        InitStrategy::CompleteCaseOls => {
            let rows = data.complete_rows();
            if rows.len() < p + 2 {
                return Err(VfemError::InsufficientCompleteCases { needed: p + 2, found: rows.len() });
            }
            let cc = data.subset(&rows)?;
            match cfg.engine {
                Engine::Oracle => ols(&cc.pooled_with_nan(), cc.y())?,
                Engine::Federated => federated_ols(&cc, &cfg.federation)?,
            }
        }
    };
    Ok(ModelParameters::new(beta, mu, sigma, sigma2))
}

/// OLS on a fully observed dataset through one closed-form protocol round.
pub fn federated_ols(data: &VerticalDataset, fed: &FederationConfig) -> Result<DVector<f64>> {
    if data.complete_rows().len() != data.n() {
        return Err(VfemError::InvalidInput("federated OLS needs fully observed rows".into()));
    }
    let p = data.p();
    let y = data.y();
    let mean = y.mean();
    let sigma2 = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.n() as f64).max(1.0);
    let theta = ModelParameters::new(
        DVector::zeros(p),
        data.layout().dims().iter().map(|&d| DVector::zeros(d)).collect(),
        data.layout().dims().iter().map(|&d| DMatrix::identity(d, d)).collect(),
        sigma2,
    );
    let mut cfg = fed.clone();
    cfg.trace = None;
    cfg.record = false;
    cfg.drop_message = None;
    let mut federation = Federation::launch(data, &theta, &cfg)?;
    federation.iterate(UpdateRule::ClosedForm)?;
    let beta = federation.parameters()?.beta;
    federation.finish()?;
    Ok(beta)
}

/// 2 / (λ_max + λ_min) over the eigenvalues of every Σ_k.
pub fn adaptive_learning_rate(theta: &ModelParameters) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for s in &theta.sigma {
        for l in symmetric_eigenvalues(s).iter() {
            lo = lo.min(*l);
            hi = hi.max(*l);
        }
    }
    2.0 / (hi + lo.max(0.0))
}

/// Tracks the stopping and divergence rules over the loss sequence.
struct Monitor {
    tolerance: f64,
    beta_tolerance: f64,
    window: usize,
    losses: Vec<f64>,
    steps: Vec<f64>,
    rising: usize,
    best: f64,
}

enum Verdict {
    Continue { improved: bool },
    Stop { converged: bool },
    Diverging,
}

impl Monitor {
    fn new(cfg: &FitConfig) -> Self {
        Self {
            tolerance: cfg.tolerance,
            beta_tolerance: cfg.beta_tolerance,
            window: cfg.guard_window,
            losses: Vec::new(),
            steps: Vec::new(),
            rising: 0,
            best: f64::INFINITY,
        }
    }

    fn observe(&mut self, loss: f64, step: f64) -> Verdict {
        if !loss.is_finite() {
            return Verdict::Diverging;
        }
        let prev = self.losses.last().copied();
        self.losses.push(loss);
        self.steps.push(step);
        let improved = loss < self.best;
        if improved {
            self.best = loss;
        }
        if let Some(prev) = prev {
            let delta = loss - prev;
            if delta.abs() < self.tolerance {
                return Verdict::Stop { converged: true };
            }
            self.rising = if delta > 0.0 { self.rising + 1 } else { 0 };
        }
        // ℓ^(t) is evaluated at θ^(t), one step behind β^(t+1), so β must
        // stall twice before ℓ has caught up.
        let n = self.steps.len();
        if n >= 2 && self.steps[n - 2..].iter().all(|&s| s < self.beta_tolerance) {
            return Verdict::Stop { converged: false };
        }
        if self.rising >= self.window {
            let tail = &self.steps[self.steps.len() - self.window..];
            if tail.windows(2).all(|w| w[1] >= w[0]) {
                return Verdict::Diverging;
            }
        }
        Verdict::Continue { improved }
    }

    fn reset_after_restart(&mut self) {
        self.rising = 0;
    }
}

pub fn fit(data: &VerticalDataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let theta0 = initialize(data, cfg)?;
    fit_from(data, theta0, cfg)
}

/// Run the configured engine from explicit starting values.
pub fn fit_from(data: &VerticalDataset, theta0: ModelParameters, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    theta0.validate(data.layout())?;
    match cfg.engine {
        Engine::Oracle => fit_oracle(data, theta0, cfg),
        Engine::Federated => fit_federated(data, theta0, cfg),
    }
}

fn fit_oracle(data: &VerticalDataset, mut theta: ModelParameters, cfg: &FitConfig) -> Result<FitResult> {
    let mut monitor = Monitor::new(cfg);
    let mut result = FitResult {
        theta: theta.clone(),
        loss_trace: Vec::new(),
        step_trace: Vec::new(),
        beta_trace: Vec::new(),
        iterations: 0,
        converged: false,
        engine: Engine::Oracle,
        eta: f64::NAN,
        halvings: 0,
        traffic: None,
    };
    for _ in 0..cfg.max_iters {
        let next = closed_form_m_step(&theta, data)?;
        let loss = next.sigma2;
        let step = (&next.beta - &theta.beta).norm();
        theta = next;
        result.loss_trace.push(loss);
        result.step_trace.push(step);
        if cfg.track_beta {
            result.beta_trace.push(theta.beta.clone());
        }
        result.iterations += 1;
        match monitor.observe(loss, step) {
            Verdict::Stop { converged } => {
                result.converged = converged || monitor_converged(&result.loss_trace, cfg.tolerance);
                break;
            }
            // EM ascends the likelihood; a rising ℓ is not a failure here.
            Verdict::Diverging | Verdict::Continue { .. } => {}
        }
    }
    result.theta = theta;
    Ok(result)
}

fn monitor_converged(losses: &[f64], tol: f64) -> bool {
    losses.len() >= 2 && (losses[losses.len() - 1] - losses[losses.len() - 2]).abs() < tol
}

fn fit_federated(data: &VerticalDataset, theta0: ModelParameters, cfg: &FitConfig) -> Result<FitResult> {
    let mut eta = match cfg.learning_rate {
        LearningRate::Adaptive => adaptive_learning_rate(&theta0),
        LearningRate::Constant(eta) => eta,
    };
    let mut fed = Federation::launch(data, &theta0, &cfg.federation)?;
    let mut monitor = Monitor::new(cfg);
    let mut result = FitResult {
        theta: theta0,
        loss_trace: Vec::new(),
        step_trace: Vec::new(),
        beta_trace: Vec::new(),
        iterations: 0,
        converged: false,
        engine: Engine::Federated,
        eta,
        halvings: 0,
        traffic: None,
    };
    let mut checkpointed = false;
    for _ in 0..cfg.max_iters {
        let summary = fed.iterate(UpdateRule::Gradient(eta))?;
        result.loss_trace.push(summary.loss);
        result.step_trace.push(summary.step_norm);
        result.iterations += 1;
        if cfg.track_beta {
            result.beta_trace.push(fed.parameters()?.beta);
        }
        match monitor.observe(summary.loss, summary.step_norm) {
            Verdict::Continue { improved } => {
                if improved {
                    fed.checkpoint()?;
                    checkpointed = true;
                }
            }
            Verdict::Stop { converged } => {
                result.converged = converged || monitor_converged(&result.loss_trace, cfg.tolerance);
                break;
            }
            Verdict::Diverging => {
                if result.halvings >= cfg.max_halvings || !checkpointed {
                    break;
                }
                eta /= 2.0;
                result.halvings += 1;
                fed.restore()?;
                monitor.reset_after_restart();
            }
        }
    }
    if result.converged {
        fed.announce_converged()?;
    }
    result.theta = fed.parameters()?;
    result.eta = eta;
    let outcome = fed.finish()?;
    result.traffic = Some(outcome.traffic);
    Ok(result)
}

/// Held-out predictions: missing blocks filled with μ̂_k (y is not used).
#[derive(Debug, Clone)]
pub struct Prediction {
    pub fitted: DVector<f64>,
    pub mse: f64,
}

pub fn predict(theta: &ModelParameters, test: &VerticalDataset) -> Prediction {
    let layout = test.layout();
    let fitted = DVector::from_fn(test.n(), |i, _| {
        (0..layout.num_clients())
            .map(|k| {
                let beta = theta.beta_block(layout, k);
                let client = test.client(k);
                if client.is_missing(i) {
                    theta.mu[k].dot(&beta)
                } else {
                    client.row(i).dot(&beta)
                }
            })
            .sum()
    });
    let mse = (test.y() - &fitted).norm_squared() / test.n() as f64;
    Prediction { fitted, mse }
}

/// ℓ at θ without updating anything.
pub fn loss_at(theta: &ModelParameters, data: &VerticalDataset) -> Result<f64> {
    let pc = e_step(theta, data)?;
    Ok(observed_loss(&pc.residuals, &pc.v4_vector()))
}
