//! Client-side state machine. A client only ever touches its own block.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::message::{
    Envelope, MissingRows, ModelMatrix, ModelVector, ProtocolMessage, SampleScalars, SchemaContext, Sketch,
    SketchMode, SketchSeeding, UpdateRule,
};
use crate::error::{Result, VfemError};
use crate::linalg::{repair_psd, unvech, vech, vech_indices, EIGEN_FLOOR};
use crate::model::ClientView;
use crate::seed;

/// Client `k`'s share of θ.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalParameters {
    pub beta: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl LocalParameters {
    pub fn dim(&self) -> usize {
        let p = self.beta.len();
        2 * p + p * (p + 1) / 2
    }

    fn perturb(&mut self, coord: usize, delta: f64) -> Result<()> {
        let p = self.beta.len();
        if coord < p {
            self.beta[coord] += delta;
        } else if coord < 2 * p {
            self.mu[coord - p] += delta;
        } else {
            let (a, b) = vech_indices(p)
                .nth(coord - 2 * p)
                .ok_or_else(|| VfemError::InvalidInput(format!("coordinate {coord} out of range")))?;
            self.sigma[(a, b)] += delta;
            if a != b {
                self.sigma[(b, a)] += delta;
            }
        }
        Ok(())
    }
}

/// Client secrets for sketch randomness. `shared` is known to every client
/// but never to the coordinator.
#[derive(Debug, Clone, Copy)]
pub struct SketchSecrets {
    pub shared: u64,
    pub own: u64,
}

/// Per-iteration snapshot kept when recording is on.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub t: u64,
    pub before: LocalParameters,
    /// x̃ block, `p_k × n`.
    pub pseudo: DMatrix<f64>,
    pub alpha: Vec<(usize, DVector<f64>)>,
    pub gradient: DVector<f64>,
    pub after: LocalParameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Setup,
    Idle,
    AwaitBroadcast,
    AwaitResidual,
    AwaitProjection,
    Staged,
    CgProduct,
    CgStep,
}

struct CgState {
    delta: DVector<f64>,
    resid: DVector<f64>,
    dir: DVector<f64>,
    adir: DVector<f64>,
}

pub struct ClientAgent {
    k: usize,
    view: ClientView,
    theta: LocalParameters,
    saved: Option<LocalParameters>,
    staged: Option<LocalParameters>,
    secrets: SketchSecrets,
    schema: SchemaContext,

    t: u64,
    round: u32,
    phase: Phase,
    rule: UpdateRule,

    coupling: DVector<f64>,
    pseudo: DMatrix<f64>,
    d: DVector<f64>,
    residuals: DVector<f64>,
    alpha: Vec<(usize, DVector<f64>)>,
    gradient: DVector<f64>,
    cg: Option<CgState>,
    have_estep: bool,

    record: Option<Vec<ClientRecord>>,
}

impl ClientAgent {
    pub fn new(view: ClientView, theta: LocalParameters, dims: Vec<usize>, secrets: SketchSecrets) -> Self {
        let k = view.index();
        let n = view.n();
        let p = view.dim();
        let mut schema = SchemaContext::new(n, dims);
        schema.missing[k] = Some(view.missing().to_vec());
        Self {
            k,
            theta,
            saved: None,
            staged: None,
            secrets,
            schema,
            t: 0,
            round: 0,
            phase: Phase::Setup,
            rule: UpdateRule::Hold,
            coupling: DVector::zeros(p),
            pseudo: DMatrix::zeros(p, n),
            d: DVector::zeros(n),
            residuals: DVector::zeros(n),
            alpha: Vec::new(),
            gradient: DVector::zeros(p),
            cg: None,
            have_estep: false,
            record: None,
            view,
        }
    }

    pub fn with_recording(mut self) -> Self {
        self.record = Some(Vec::new());
        self
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn parameters(&self) -> &LocalParameters {
        &self.theta
    }

    pub fn records(&self) -> &[ClientRecord] {
        self.record.as_deref().unwrap_or(&[])
    }

    fn desync(&self, env: &Envelope, why: &str) -> VfemError {
        VfemError::ProtocolDesync(format!(
            "client {} at (t={}, round={}, {:?}) got {} at (t={}, round={}): {why}",
            self.k + 1,
            self.t,
            self.round,
            self.phase,
            env.body.kind(),
            env.t,
            env.round
        ))
    }

    /// Process one coordinator message. Returns the replies and whether to stop.
    pub fn handle(&mut self, env: Envelope) -> Result<(Vec<Envelope>, bool)> {
        if env.from != 0 {
            return Err(self.desync(&env, "message not from the coordinator"));
        }
        let fresh = matches!(env.body, ProtocolMessage::RoundBegin { .. });
        let in_order = if fresh {
            env.t == self.t + 1 && env.round == 0
        } else if self.phase == Phase::Setup {
            env.t == 0 && env.round == 0
        } else {
            env.t == self.t && env.round == self.round + 1
        };
        if !in_order {
            return Err(self.desync(&env, "out of sequence"));
        }
        env.body.validate(self.k, &self.schema)?;
        self.t = env.t;
        self.round = env.round;
        let (t, round) = (env.t, env.round);
        let mut stop = false;
        let replies = self.dispatch(env, &mut stop)?;
        let from = self.k as u32 + 1;
        Ok((replies.into_iter().map(|m| Envelope::new(t, round, from, m)).collect(), stop))
    }

    fn dispatch(&mut self, env: Envelope, stop: &mut bool) -> Result<Vec<ProtocolMessage>> {
        use ProtocolMessage as M;
        let phase = self.phase;
        let out = match (phase, env.body) {
            (Phase::Setup, M::Hello) => {
                self.phase = Phase::Idle;
                let flags = self.view.missing().iter().map(|&m| m as u8 as f64).collect();
                vec![M::MissingIndicator { missing: SampleScalars::from_vec(flags) }]
            }
            (Phase::Idle, M::RoundBegin { rule }) => {
                self.rule = rule;
                self.phase = Phase::AwaitBroadcast;
                self.round_local_fit()
            }
            (Phase::AwaitBroadcast, M::EStepBroadcast { d, r }) => {
                self.phase = Phase::AwaitResidual;
                self.round_impute(d.to_vector(), r.to_vector())
            }
            (Phase::AwaitResidual, M::MStepResidualAndCoupling { e, v, at }) => {
                self.phase = Phase::AwaitProjection;
                self.round_project(e.to_vector(), &v, &at)?
            }
            (Phase::AwaitProjection, M::MStepAggregatedProjection { s }) => {
                self.phase = Phase::Staged;
                self.round_update(&s)?
            }
            (Phase::Staged, M::CgDirection { beta }) if self.cg.is_some() => {
                self.phase = Phase::CgProduct;
                self.cg_direction(beta)
            }
            (Phase::CgProduct, M::CgMatvec { z, c }) => {
                self.phase = Phase::CgStep;
                self.cg_matvec(&z, &c)
            }
            (Phase::CgStep, M::CgStep { alpha }) => {
                self.phase = Phase::Staged;
                self.cg_step(alpha)
            }
            (Phase::Staged, M::RoundEnd) => {
                self.phase = Phase::Idle;
                self.commit()
            }
            (Phase::Idle, M::LocalGramRequest) if self.have_estep => self.local_gram(),
            (Phase::Idle, M::SketchRequest { replicate, rows, mode, seeding }) if self.have_estep => {
                self.sketch(replicate, rows, mode, seeding)
            }
            (Phase::Idle, M::ReportParameters) => vec![M::ParameterReport {
                beta: ModelVector::new(&self.theta.beta),
                mu: ModelVector::new(&self.theta.mu),
                sigma: ModelVector::from_vec(vech(&self.theta.sigma)),
            }],
            (Phase::Idle, M::Checkpoint) => {
                self.saved = Some(self.theta.clone());
                vec![]
            }
            (Phase::Idle, M::Restore) => {
                self.theta = self.saved.clone().ok_or_else(|| {
                    VfemError::ProtocolDesync(format!("client {} has no checkpoint", self.k + 1))
                })?;
                vec![]
            }
            (Phase::Idle, M::Perturb { coord, delta }) => {
                self.theta.perturb(coord, delta)?;
                vec![]
            }
            (Phase::Idle, M::Converged) => vec![],
            (_, M::Shutdown) => {
                *stop = true;
                vec![]
            }
            (_, body) => {
                let env = Envelope { body, ..env };
                return Err(self.desync(&env, "unexpected in this phase"));
            }
        };
        Ok(out)
    }

    fn round_local_fit(&mut self) -> Vec<ProtocolMessage> {
        let beta = &self.theta.beta;
        self.coupling = &self.theta.sigma * beta;
        let v1 = self.coupling.dot(beta);
        let fill = self.theta.mu.dot(beta);
        let hbar = (0..self.view.n())
            .map(|i| if self.view.is_missing(i) { fill } else { self.view.row(i).dot(beta) })
            .collect();
        vec![
            ProtocolMessage::EStepLocalFit { hbar: SampleScalars::from_vec(hbar) },
            ProtocolMessage::EStepQuadForm { v1 },
        ]
    }

    fn round_impute(&mut self, d: DVector<f64>, r: DVector<f64>) -> Vec<ProtocolMessage> {
        let n = self.view.n();
        let beta = &self.theta.beta;
        let mut htilde = Vec::with_capacity(n);
        for i in 0..n {
            let mut col = self.pseudo.column_mut(i);
            if self.view.is_missing(i) {
                col.copy_from(&self.theta.mu);
                col.axpy(r[i] / d[i], &self.coupling, 1.0);
            } else {
                col.copy_from(&self.view.row(i));
            }
            htilde.push(col.dot(beta));
        }
        self.d = d;
        self.have_estep = false;
        vec![
            ProtocolMessage::MStepLocalFit { htilde: SampleScalars::from_vec(htilde) },
            ProtocolMessage::MStepCouplingVec { u: ModelVector::new(&self.coupling) },
        ]
    }

    fn check_rows(&self, rows: &MissingRows, what: &str) -> Result<()> {
        let expected = self.view.missing().iter().filter(|&&m| m).count();
        if rows.len() != expected {
            return Err(VfemError::ProtocolDesync(format!(
                "client {}: {what} covers {} rows, expected {expected}",
                self.k + 1,
                rows.len()
            )));
        }
        Ok(())
    }

    fn round_project(&mut self, e: DVector<f64>, v: &MissingRows, at: &MissingRows) -> Result<Vec<ProtocolMessage>> {
        self.check_rows(v, "coupling")?;
        let p = self.view.dim();
        let beta = &self.theta.beta;
        let full = !at.is_empty();
        let mut offsets = at.iter();
        let mut w = MissingRows::new();
        for (i, chunk) in v.iter() {
            let (q, off, stride) = if full {
                let (_, a) = offsets.next().ok_or_else(|| VfemError::Schema("missing column offset".into()))?;
                let q = (chunk.len() as f64).sqrt().round() as usize;
                (q, a[0] as usize, q)
            } else {
                (chunk.len() / p, 0, p)
            };
            let inv = 1.0 / self.d[i];
            let proj: Vec<f64> = (0..q)
                .map(|row| (0..p).map(|c| chunk[row * stride + off + c] * beta[c]).sum::<f64>() * inv)
                .collect();
            w.push(i, &proj);
        }
        self.residuals = e;
        Ok(vec![ProtocolMessage::MStepPartialProjection { w }])
    }

    fn round_update(&mut self, s: &MissingRows) -> Result<Vec<ProtocolMessage>> {
        self.check_rows(s, "aggregated projection")?;
        let n = self.view.n();
        let nf = n as f64;
        let beta = &self.theta.beta;
        let mut v5 = vec![0.0; n];
        let mut grad = &self.pseudo * &self.residuals;
        let mut inv_sum = 0.0;
        self.alpha.clear();
        for (i, chunk) in s.iter() {
            let a = &self.coupling - DVector::from_column_slice(chunk);
            v5[i] = beta.dot(&a);
            grad -= &a;
            inv_sum += 1.0 / self.d[i];
            self.alpha.push((i, a));
        }
        grad /= nf;
        self.gradient = grad;

        let mu = self.pseudo.column_sum() / nf;
        let mut centred = self.pseudo.clone();
        for mut col in centred.column_iter_mut() {
            col -= &self.theta.mu;
        }
        let m = s.len() as f64;
        let cond = &self.theta.sigma * m - &self.coupling * self.coupling.transpose() * inv_sum;
        let sigma = repair_psd(&((&centred * centred.transpose() + cond) / nf), EIGEN_FLOOR).0;
        let next_beta = match self.rule {
            UpdateRule::Gradient(eta) => beta + &self.gradient * eta,
            _ => beta.clone(),
        };
        self.staged = Some(LocalParameters { beta: next_beta, mu, sigma });
        self.have_estep = true;

        let mut out = vec![ProtocolMessage::VarStepScalar { v5: SampleScalars::from_vec(v5) }];
        if self.rule == UpdateRule::ClosedForm {
            let resid = &self.gradient * nf;
            let rr = resid.norm_squared();
            let p = resid.len();
            self.cg = Some(CgState {
                delta: DVector::zeros(p),
                dir: DVector::zeros(p),
                adir: DVector::zeros(p),
                resid,
            });
            out.push(ProtocolMessage::CgResidualNorm { rr });
        } else {
            self.cg = None;
        }
        Ok(out)
    }

    fn cg_direction(&mut self, beta: f64) -> Vec<ProtocolMessage> {
        let cg = self.cg.as_mut().expect("phase guarantees CG state");
        cg.dir = &cg.resid + &cg.dir * beta;
        let h = self.pseudo.tr_mul(&cg.dir);
        let c = self.coupling.dot(&cg.dir);
        vec![ProtocolMessage::CgLocalProduct { h: SampleScalars::new(h), c }]
    }

    fn cg_matvec(&mut self, z: &SampleScalars, c: &SampleScalars) -> Vec<ProtocolMessage> {
        let cg = self.cg.as_mut().expect("phase guarantees CG state");
        let z = z.to_vector();
        let c = c.as_slice();
        let mut m = 0.0;
        let mut csum = 0.0;
        for (i, &miss) in self.view.missing().iter().enumerate() {
            if miss {
                m += 1.0;
                csum += c[i];
            }
        }
        cg.adir = &self.pseudo * z + &self.theta.sigma * &cg.dir * m - &self.coupling * csum;
        vec![ProtocolMessage::CgCurvature { pap: cg.dir.dot(&cg.adir) }]
    }

    fn cg_step(&mut self, alpha: f64) -> Vec<ProtocolMessage> {
        let cg = self.cg.as_mut().expect("phase guarantees CG state");
        cg.delta.axpy(alpha, &cg.dir, 1.0);
        cg.resid.axpy(-alpha, &cg.adir, 1.0);
        vec![ProtocolMessage::CgResidualNorm { rr: cg.resid.norm_squared() }]
    }

    fn commit(&mut self) -> Vec<ProtocolMessage> {
        let mut next = self.staged.take().expect("staged in the update round");
        if self.rule == UpdateRule::ClosedForm {
            if let Some(cg) = self.cg.take() {
                next.beta = &self.theta.beta + cg.delta;
            }
        }
        let sq = (&next.beta - &self.theta.beta).norm_squared();
        if let Some(rec) = self.record.as_mut() {
            rec.push(ClientRecord {
                t: self.t,
                before: self.theta.clone(),
                pseudo: self.pseudo.clone(),
                alpha: self.alpha.clone(),
                gradient: self.gradient.clone(),
                after: next.clone(),
            });
        }
        if self.rule == UpdateRule::Hold {
            return vec![ProtocolMessage::StepNorm { sq: 0.0 }];
        }
        self.theta = next;
        vec![ProtocolMessage::StepNorm { sq }]
    }

    /// Exact within-block products at the current E-step.
    fn local_gram(&self) -> Vec<ProtocolMessage> {
        let x = &self.pseudo;
        let mut centred = x.clone();
        for mut col in centred.column_iter_mut() {
            col -= &self.theta.mu;
        }
        vec![ProtocolMessage::LocalGram {
            gram: ModelMatrix::new(&(x * x.transpose())),
            centred_gram: ModelMatrix::new(&(&centred * centred.transpose())),
            cross_e: ModelVector::new(&(x * &self.residuals)),
            sum: ModelVector::new(&x.column_sum()),
            centred_sum: ModelVector::new(&centred.column_sum()),
        }]
    }

    fn sketch(&self, replicate: u64, rows: usize, mode: SketchMode, seeding: SketchSeeding) -> Vec<ProtocolMessage> {
        let n = self.view.n();
        let (secret, client_tag) = match seeding {
            SketchSeeding::Shared => (self.secrets.shared, u64::MAX),
            SketchSeeding::Independent => (self.secrets.own, self.k as u64),
        };
        let a = gaussian_projection(secret, &[replicate, 0, client_tag], rows, n) * self.pseudo.transpose();
        let b = (mode == SketchMode::Full).then(|| {
            let mut centred = self.pseudo.clone();
            for mut col in centred.column_iter_mut() {
                col -= &self.theta.mu;
            }
            gaussian_projection(secret, &[replicate, 1, client_tag], rows, n) * centred.transpose()
        });
        vec![ProtocolMessage::SketchBlock { a: Sketch::new(&a), b: b.as_ref().map(Sketch::new) }]
    }
}

/// `m × n` matrix of i.i.d. N(0, 1/m) entries from the given stream.
pub fn gaussian_projection(secret: u64, tags: &[u64], m: usize, n: usize) -> DMatrix<f64> {
    let mut rng = seed::rng(secret, tags);
    let scale = 1.0 / (m as f64).sqrt();
    DMatrix::from_fn(m, n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

/// Rebuild a client's parameters from a report.
pub fn local_from_report(beta: &ModelVector, mu: &ModelVector, sigma: &ModelVector) -> LocalParameters {
    let p = beta.len();
    LocalParameters { beta: beta.to_vector(), mu: mu.to_vector(), sigma: unvech(sigma.as_slice(), p) }
}
