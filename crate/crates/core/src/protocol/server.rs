//! Coordinator state machine. Lives with the first client and holds `y`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::client::{local_from_report, ClientAgent, LocalParameters};
use super::message::{
    Envelope, MissingRows, ProtocolMessage, SampleScalars, SchemaContext, SketchMode, SketchSeeding, UpdateRule,
};
use super::transport::{Endpoint, TraceWriter, Traffic};
use crate::error::{Result, VfemError};
use crate::model::{BlockLayout, MissingMask, ModelParameters, MIN_VARIANCE};

/// How the coordinator ships `V_i = U_i U_iᵀ` to clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CouplingMode {
    /// Each client receives only its column slice.
    #[default]
    Slices,
    /// Each client receives all of `V_i` plus its column offset.
    Full,
}

pub(crate) enum Link {
    /// Stepped by the coordinator's thread.
    Local { agent: Box<ClientAgent>, inbox: VecDeque<Envelope>, outbox: VecDeque<Envelope> },
    /// Running on its own worker.
    Remote(Box<dyn Endpoint>),
}

impl Link {
    fn send(&mut self, env: Envelope) -> Result<()> {
        match self {
            Link::Local { inbox, .. } => {
                inbox.push_back(env);
                Ok(())
            }
            Link::Remote(ep) => ep.send(env),
        }
    }

    fn recv(&mut self, k: usize) -> Result<Envelope> {
        match self {
            Link::Local { agent, inbox, outbox } => {
                while let Some(env) = inbox.pop_front() {
                    let (replies, _) = agent.handle(env)?;
                    outbox.extend(replies);
                }
                outbox.pop_front().ok_or_else(|| {
                    VfemError::ProtocolDesync(format!("client {} sent no reply", k + 1))
                })
            }
            Link::Remote(ep) => ep.recv(),
        }
    }
}

/// Per-iteration coordinator snapshot kept when recording is on.
#[derive(Debug, Clone)]
pub struct ServerRecord {
    pub t: u64,
    pub sigma2_before: f64,
    pub d: DVector<f64>,
    pub r: DVector<f64>,
    pub residuals: DVector<f64>,
    pub v4: DVector<f64>,
    pub sigma2_after: f64,
}

/// Outcome of one federated EM iteration.
#[derive(Debug, Clone, Copy)]
pub struct IterationSummary {
    pub t: u64,
    /// ℓ computed from this iteration's residuals and corrections.
    pub loss: f64,
    pub sigma2: f64,
    /// ‖β^(t+1) − β^(t)‖₂.
    pub step_norm: f64,
    pub rounds: u32,
    pub cg_iterations: usize,
    pub traffic: Traffic,
}

/// What the coordinator retains from the latest E-step.
#[derive(Debug, Clone)]
pub struct EStepState {
    pub d: DVector<f64>,
    pub residuals: DVector<f64>,
    pub v4: DVector<f64>,
    pub coupling: Vec<DVector<f64>>,
    pub quad: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CgSettings {
    pub rel_tol: f64,
    pub min_iter_cap: usize,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self { rel_tol: 1e-13, min_iter_cap: 50 }
    }
}

pub struct ServerCoordinator {
    y: DVector<f64>,
    layout: BlockLayout,
    mask: MissingMask,
    sigma2: f64,
    saved_sigma2: Option<f64>,
    pub(crate) links: Vec<Link>,
    t: u64,
    round: u32,
    traffic: Traffic,
    trace: Option<TraceWriter>,
    drop_down: Option<u64>,
    schema: SchemaContext,
    coupling_mode: CouplingMode,
    cg: CgSettings,
    last: Option<EStepState>,
    record: Option<Vec<ServerRecord>>,
}

impl ServerCoordinator {
    pub(crate) fn new(
        y: DVector<f64>,
        layout: BlockLayout,
        sigma2: f64,
        links: Vec<Link>,
        coupling_mode: CouplingMode,
        cg: CgSettings,
    ) -> Self {
        let n = y.len();
        let k = layout.num_clients();
        Self {
            schema: SchemaContext::new(n, layout.dims().to_vec()),
            mask: MissingMask::new(n, k),
            y,
            layout,
            sigma2,
            saved_sigma2: None,
            links,
            t: 0,
            round: 0,
            traffic: Traffic::default(),
            trace: None,
            drop_down: None,
            coupling_mode,
            cg,
            last: None,
            record: None,
        }
    }

    pub(crate) fn set_trace(&mut self, trace: TraceWriter) {
        self.trace = Some(trace);
    }

    pub(crate) fn set_drop(&mut self, nth: u64) {
        self.drop_down = Some(nth);
    }

    pub(crate) fn enable_recording(&mut self) {
        self.record = Some(Vec::new());
    }

    pub fn records(&self) -> &[ServerRecord] {
        self.record.as_deref().unwrap_or(&[])
    }

    pub fn traffic(&self) -> Traffic {
        self.traffic
    }

    pub fn mask(&self) -> &MissingMask {
        &self.mask
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn last_estep(&self) -> Option<&EStepState> {
        self.last.as_ref()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    fn num_clients(&self) -> usize {
        self.links.len()
    }

    fn send(&mut self, k: usize, body: ProtocolMessage) -> Result<()> {
        let env = Envelope::new(self.t, self.round, 0, body);
        let seq = self.traffic.down.messages;
        self.traffic.down.record(&env);
        if self.drop_down == Some(seq) {
            return Ok(());
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.write(&env)?;
        }
        self.links[k].send(env)
    }

    fn broadcast(&mut self, body: ProtocolMessage) -> Result<()> {
        for k in 0..self.num_clients() {
            self.send(k, body.clone())?;
        }
        Ok(())
    }

    fn recv(&mut self, k: usize) -> Result<ProtocolMessage> {
        let env = self.links[k].recv(k)?;
        if env.t != self.t || env.round != self.round || env.from as usize != k + 1 {
            return Err(VfemError::ProtocolDesync(format!(
                "expected reply from client {} at (t={}, round={}), got {} from {} at (t={}, round={})",
                k + 1,
                self.t,
                self.round,
                env.body.kind(),
                env.from,
                env.t,
                env.round
            )));
        }
        env.body.validate(k, &self.schema)?;
        self.traffic.up.record(&env);
        if let Some(trace) = self.trace.as_mut() {
            trace.write(&env)?;
        }
        Ok(env.body)
    }

    fn unexpected(&self, k: usize, got: &ProtocolMessage, wanted: &str) -> VfemError {
        VfemError::ProtocolDesync(format!(
            "client {} sent {} in round {} of t={}, expected {wanted}",
            k + 1,
            got.kind(),
            self.round,
            self.t
        ))
    }

    /// Setup: learn every client's missing indicator.
    pub(crate) fn handshake(&mut self) -> Result<()> {
        self.broadcast(ProtocolMessage::Hello)?;
        let n = self.y.len();
        for k in 0..self.num_clients() {
            match self.recv(k)? {
                ProtocolMessage::MissingIndicator { missing } => {
                    let flags: Vec<bool> = missing.as_slice().iter().map(|&v| v != 0.0).collect();
                    for (i, &m) in flags.iter().enumerate().take(n) {
                        self.mask.set(i, k, m);
                    }
                    self.schema.missing[k] = Some(flags);
                }
                other => return Err(self.unexpected(k, &other, "MissingIndicator")),
            }
        }
        Ok(())
    }

    /// One full iteration of the E-step and M-step rounds.
    pub fn iterate(&mut self, rule: UpdateRule) -> Result<IterationSummary> {
        let start = self.traffic;
        let kk = self.num_clients();
        let n = self.y.len();
        self.t += 1;
        self.round = 0;

        // E-step: local fits and quadratic forms.
        self.broadcast(ProtocolMessage::RoundBegin { rule })?;
        let mut d = DVector::from_element(n, self.sigma2);
        let mut r = self.y.clone();
        let mut quad = vec![0.0; kk];
        for k in 0..kk {
            match self.recv(k)? {
                ProtocolMessage::EStepLocalFit { hbar } => r -= hbar.to_vector(),
                other => return Err(self.unexpected(k, &other, "EStepLocalFit")),
            }
            match self.recv(k)? {
                ProtocolMessage::EStepQuadForm { v1 } => quad[k] = v1,
                other => return Err(self.unexpected(k, &other, "EStepQuadForm")),
            }
        }
        for i in 0..n {
            for k in self.mask.missing_clients(i) {
                d[i] += quad[k];
            }
        }
        if let Some(i) = d.iter().position(|&v| !(v > MIN_VARIANCE)) {
            return Err(VfemError::DegenerateVariance(format!("d_{i} = {:.3e}", d[i])));
        }

        // Imputation, residuals and coupling vectors.
        self.round += 1;
        self.broadcast(ProtocolMessage::EStepBroadcast {
            d: SampleScalars::new(d.clone()),
            r: SampleScalars::new(r.clone()),
        })?;
        let mut e = self.y.clone();
        let mut coupling = Vec::with_capacity(kk);
        for k in 0..kk {
            match self.recv(k)? {
                ProtocolMessage::MStepLocalFit { htilde } => e -= htilde.to_vector(),
                other => return Err(self.unexpected(k, &other, "MStepLocalFit")),
            }
            match self.recv(k)? {
                ProtocolMessage::MStepCouplingVec { u } => coupling.push(u.to_vector()),
                other => return Err(self.unexpected(k, &other, "MStepCouplingVec")),
            }
        }

        // α sub-protocol: coupling slices out, partial projections back.
        self.round += 1;
        for k in 0..kk {
            let (v, at) = self.coupling_payload(k, &coupling);
            self.send(k, ProtocolMessage::MStepResidualAndCoupling { e: SampleScalars::new(e.clone()), v, at })?;
        }
        let mut s: Vec<Option<DVector<f64>>> = vec![None; n];
        for k in 0..kk {
            match self.recv(k)? {
                ProtocolMessage::MStepPartialProjection { w } => {
                    for (i, chunk) in w.iter() {
                        let chunk = DVector::from_column_slice(chunk);
                        match &mut s[i] {
                            Some(acc) if acc.len() == chunk.len() => *acc += chunk,
                            Some(_) => {
                                return Err(VfemError::Schema(format!("projection width mismatch at row {i}")))
                            }
                            slot => *slot = Some(chunk),
                        }
                    }
                }
                other => return Err(self.unexpected(k, &other, "MStepPartialProjection")),
            }
        }

        self.round += 1;
        for k in 0..kk {
            let mut slice = MissingRows::new();
            for i in 0..n {
                if !self.mask.is_missing(i, k) {
                    continue;
                }
                let off = self.offset_within(i, k);
                let acc = s[i]
                    .as_ref()
                    .ok_or_else(|| VfemError::ProtocolDesync(format!("no projection for row {i}")))?;
                slice.push(i, &acc.as_slice()[off..off + self.layout.dim(k)]);
            }
            self.send(k, ProtocolMessage::MStepAggregatedProjection { s: slice })?;
        }
        let mut v4 = DVector::zeros(n);
        let mut rr = 0.0;
        for k in 0..kk {
            match self.recv(k)? {
                ProtocolMessage::VarStepScalar { v5 } => v4 += v5.to_vector(),
                other => return Err(self.unexpected(k, &other, "VarStepScalar")),
            }
            if rule == UpdateRule::ClosedForm {
                match self.recv(k)? {
                    ProtocolMessage::CgResidualNorm { rr: part } => rr += part,
                    other => return Err(self.unexpected(k, &other, "CgResidualNorm")),
                }
            }
        }
        let loss = crate::model::observed_loss(&e, &v4);

        let cg_iterations = if rule == UpdateRule::ClosedForm { self.conjugate_gradient(rr, &d)? } else { 0 };

        self.round += 1;
        self.broadcast(ProtocolMessage::RoundEnd)?;
        let mut sq = 0.0;
        for k in 0..kk {
            match self.recv(k)? {
                ProtocolMessage::StepNorm { sq: part } => sq += part,
                other => return Err(self.unexpected(k, &other, "StepNorm")),
            }
        }
        let before = self.sigma2;
        if rule != UpdateRule::Hold {
            self.sigma2 = loss;
        }
        if let Some(rec) = self.record.as_mut() {
            rec.push(ServerRecord {
                t: self.t,
                sigma2_before: before,
                d: d.clone(),
                r,
                residuals: e.clone(),
                v4: v4.clone(),
                sigma2_after: loss,
            });
        }
        self.last = Some(EStepState { d, residuals: e, v4, coupling, quad });
        Ok(IterationSummary {
            t: self.t,
            loss,
            sigma2: loss,
            step_norm: sq.sqrt(),
            rounds: self.round + 1,
            cg_iterations,
            traffic: self.traffic.since(&start),
        })
    }

    /// Offset of client `k`'s block inside the stacked missing vector of sample `i`.
    fn offset_within(&self, i: usize, k: usize) -> usize {
        self.mask.missing_clients(i).take_while(|&a| a != k).map(|a| self.layout.dim(a)).sum()
    }

    fn coupling_payload(&self, k: usize, coupling: &[DVector<f64>]) -> (MissingRows, MissingRows) {
        let mut v = MissingRows::new();
        let mut at = MissingRows::new();
        let uk = &coupling[k];
        for i in 0..self.y.len() {
            if !self.mask.is_missing(i, k) {
                continue;
            }
            let stacked: Vec<f64> = self.mask.missing_clients(i).flat_map(|a| coupling[a].iter().cloned()).collect();
            let chunk: Vec<f64> = match self.coupling_mode {
                CouplingMode::Slices => stacked.iter().flat_map(|&ua| uk.iter().map(move |&c| ua * c)).collect(),
                CouplingMode::Full => {
                    at.push(i, &[self.offset_within(i, k) as f64]);
                    stacked.iter().flat_map(|&ua| stacked.iter().map(move |&ub| ua * ub)).collect()
                }
            };
            v.push(i, &chunk);
        }
        (v, at)
    }

    /// Solve (X̃ᵀX̃ + C) δ = n g, with every client holding its block of δ.
    fn conjugate_gradient(&mut self, rr0: f64, d: &DVector<f64>) -> Result<usize> {
        let kk = self.num_clients();
        let n = self.y.len();
        let max_iter = (2 * self.layout.total()).max(self.cg.min_iter_cap);
        let mut rr = rr0;
        let mut beta = 0.0;
        let mut it = 0;
        if !(rr0 > 0.0) {
            return Ok(0);
        }
        loop {
            self.round += 1;
            self.broadcast(ProtocolMessage::CgDirection { beta })?;
            let mut z = DVector::zeros(n);
            let mut cpart = vec![0.0; kk];
            for (k, slot) in cpart.iter_mut().enumerate() {
                match self.recv(k)? {
                    ProtocolMessage::CgLocalProduct { h, c } => {
                        z += h.to_vector();
                        *slot = c;
                    }
                    other => return Err(self.unexpected(k, &other, "CgLocalProduct")),
                }
            }
            let c = DVector::from_fn(n, |i, _| {
                self.mask.missing_clients(i).map(|k| cpart[k]).sum::<f64>() / d[i]
            });
            self.round += 1;
            self.broadcast(ProtocolMessage::CgMatvec { z: SampleScalars::new(z), c: SampleScalars::new(c) })?;
            let mut pap = 0.0;
            for k in 0..kk {
                match self.recv(k)? {
                    ProtocolMessage::CgCurvature { pap: part } => pap += part,
                    other => return Err(self.unexpected(k, &other, "CgCurvature")),
                }
            }
            if !(pap > 0.0) {
                return Err(VfemError::SingularSystem(format!("normal matrix has curvature {pap:.3e}")));
            }
            let alpha = rr / pap;
            self.round += 1;
            self.broadcast(ProtocolMessage::CgStep { alpha })?;
            let mut next = 0.0;
            for k in 0..kk {
                match self.recv(k)? {
                    ProtocolMessage::CgResidualNorm { rr: part } => next += part,
                    other => return Err(self.unexpected(k, &other, "CgResidualNorm")),
                }
            }
            it += 1;
            if next.sqrt() <= self.cg.rel_tol * rr0.sqrt() || it >= max_iter {
                return Ok(it);
            }
            beta = next / rr;
            rr = next;
        }
    }

    fn control(&mut self, body: ProtocolMessage) -> Result<()> {
        self.round += 1;
        self.broadcast(body)
    }

    pub fn checkpoint(&mut self) -> Result<()> {
        self.saved_sigma2 = Some(self.sigma2);
        self.control(ProtocolMessage::Checkpoint)
    }

    pub fn restore(&mut self) -> Result<()> {
        self.sigma2 = self
            .saved_sigma2
            .ok_or_else(|| VfemError::ProtocolDesync("restore without checkpoint".into()))?;
        self.control(ProtocolMessage::Restore)
    }

    /// Shift one coordinate of the flat θ. Non-owners receive a zero shift
    /// so every client stays on the same round counter.
    pub fn perturb(&mut self, coord: usize, delta: f64) -> Result<()> {
        let total = ModelParameters::dim(&self.layout);
        if coord >= total {
            return Err(VfemError::InvalidInput(format!("coordinate {coord} out of range")));
        }
        let owner = self.coordinate_owner(coord);
        if owner.is_none() {
            self.sigma2 += delta;
        }
        self.round += 1;
        for k in 0..self.num_clients() {
            let body = match owner {
                Some((o, local)) if o == k => ProtocolMessage::Perturb { coord: local, delta },
                _ => ProtocolMessage::Perturb { coord: 0, delta: 0.0 },
            };
            self.send(k, body)?;
        }
        Ok(())
    }

    /// `(client, local coordinate)` for a flat θ index; `None` for σ².
    pub fn coordinate_owner(&self, coord: usize) -> Option<(usize, usize)> {
        let p = self.layout.total();
        let offs = ModelParameters::offsets(&self.layout);
        if coord < p {
            let k = (0..self.layout.num_clients()).find(|&k| self.layout.range(k).contains(&coord))?;
            Some((k, coord - self.layout.offset(k)))
        } else if coord < 2 * p {
            let c = coord - p;
            let k = (0..self.layout.num_clients()).find(|&k| self.layout.range(k).contains(&c))?;
            Some((k, self.layout.dim(k) + c - self.layout.offset(k)))
        } else if coord < offs.sigma2 {
            let k = (0..self.layout.num_clients()).rev().find(|&k| offs.sigma[k] <= coord)?;
            Some((k, 2 * self.layout.dim(k) + coord - offs.sigma[k]))
        } else {
            None
        }
    }

    pub fn report_parameters(&mut self) -> Result<ModelParameters> {
        self.control(ProtocolMessage::ReportParameters)?;
        let p = self.layout.total();
        let mut beta = DVector::zeros(p);
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for k in 0..self.num_clients() {
            match self.recv(k)? {
                ProtocolMessage::ParameterReport { beta: b, mu: m, sigma: s } => {
                    let LocalParameters { beta: b, mu: m, sigma: s } = local_from_report(&b, &m, &s);
                    beta.rows_mut(self.layout.offset(k), self.layout.dim(k)).copy_from(&b);
                    mu.push(m);
                    sigma.push(s);
                }
                other => return Err(self.unexpected(k, &other, "ParameterReport")),
            }
        }
        Ok(ModelParameters::new(beta, mu, sigma, self.sigma2))
    }

    /// Exact within-block products from every client.
    pub fn local_grams(&mut self) -> Result<Vec<LocalGramReport>> {
        self.control(ProtocolMessage::LocalGramRequest)?;
        let mut out = Vec::with_capacity(self.num_clients());
        for k in 0..self.num_clients() {
            match self.recv(k)? {
                ProtocolMessage::LocalGram { gram, centred_gram, cross_e, sum, centred_sum } => out.push(LocalGramReport {
                    gram: gram.to_matrix(),
                    centred_gram: centred_gram.to_matrix(),
                    cross_e: cross_e.to_vector(),
                    sum: sum.to_vector(),
                    centred_sum: centred_sum.to_vector(),
                }),
                other => return Err(self.unexpected(k, &other, "LocalGram")),
            }
        }
        Ok(out)
    }

    /// One sketch replicate: concatenated `m × p` sketches of X̃ (and X̄).
    pub fn sketch_replicate(
        &mut self,
        replicate: u64,
        rows: usize,
        mode: SketchMode,
        seeding: SketchSeeding,
    ) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
        self.control(ProtocolMessage::SketchRequest { replicate, rows, mode, seeding })?;
        let p = self.layout.total();
        let mut a = DMatrix::zeros(rows, p);
        let mut b = (mode == SketchMode::Full).then(|| DMatrix::zeros(rows, p));
        for k in 0..self.num_clients() {
            match self.recv(k)? {
                ProtocolMessage::SketchBlock { a: sa, b: sb } => {
                    let off = self.layout.offset(k);
                    let dim = self.layout.dim(k);
                    if sa.rows() != rows {
                        return Err(VfemError::Schema("sketch has the wrong number of rows".into()));
                    }
                    a.columns_mut(off, dim).copy_from(&sa.to_matrix());
                    match (&mut b, sb) {
                        (Some(b), Some(sb)) if sb.rows() == rows => b.columns_mut(off, dim).copy_from(&sb.to_matrix()),
                        (None, None) => {}
                        _ => return Err(VfemError::Schema("centred sketch missing or unexpected".into())),
                    }
                }
                other => return Err(self.unexpected(k, &other, "SketchBlock")),
            }
        }
        Ok((a, b))
    }

    pub fn announce_converged(&mut self) -> Result<()> {
        self.control(ProtocolMessage::Converged)
    }

    /// Tell every client to stop; keeps going past dead links.
    pub(crate) fn shutdown(&mut self) -> Result<()> {
        self.round += 1;
        let mut first_err = None;
        for k in 0..self.num_clients() {
            if let Err(e) = self.send(k, ProtocolMessage::Shutdown) {
                first_err.get_or_insert(e);
            }
        }
        for link in self.links.iter_mut() {
            if let Link::Local { agent, inbox, .. } = link {
                while let Some(env) = inbox.pop_front() {
                    agent.handle(env)?;
                }
            }
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.flush()?;
        }
        first_err.map_or(Ok(()), Err)
    }
}

/// Exact within-block products reported by one client.
#[derive(Debug, Clone)]
pub struct LocalGramReport {
    /// X̃_kᵀX̃_k.
    pub gram: DMatrix<f64>,
    /// X̄_kᵀX̄_k with X̄_k = X̃_k − 1μ_kᵀ.
    pub centred_gram: DMatrix<f64>,
    /// X̃_kᵀe.
    pub cross_e: DVector<f64>,
    /// X̃_kᵀ1.
    pub sum: DVector<f64>,
    /// X̄_kᵀ1.
    pub centred_sum: DVector<f64>,
}
