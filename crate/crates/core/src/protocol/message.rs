//! The closed message vocabulary and its line codec.
//!
//! Every payload field belongs to one of six shape classes. None of them can
//! hold an `n × p_k` covariate block: per-sample payloads are single
//! n-vectors, row-indexed payloads may only name rows where the subject
//! client has no data, and sketches have fewer rows than samples.
//!
//! There is no way to put a raw block on the wire; the payload types do not
//! accept matrices with sample rows:
//!
//! ```compile_fail
//! use nalgebra::DMatrix;
//! use vfem_core::protocol::{ProtocolMessage, SampleScalars};
//! let block = DMatrix::<f64>::zeros(100, 3);
//! let msg = ProtocolMessage::EStepLocalFit { hbar: SampleScalars::new(block) };
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, VfemError};
use crate::linalg::vech_len;

/// One n-vector of per-sample scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScalars(Vec<f64>);

impl SampleScalars {
    pub fn new(v: DVector<f64>) -> Self {
        Self(v.data.into())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A vector in parameter space (length bounded by the client's block).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn new(v: &DVector<f64>) -> Self {
        Self(v.iter().cloned().collect())
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A square `p_k × p_k` matrix in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrix {
    dim: usize,
    values: Vec<f64>,
}

impl ModelMatrix {
    /// Panics unless `m` is square.
    pub fn new(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square(), "model matrices are square");
        Self { dim: m.nrows(), values: m.transpose().as_slice().to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.values)
    }
}

/// Per-row chunks, restricted to rows where the subject client is missing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MissingRows {
    rows: Vec<usize>,
    widths: Vec<usize>,
    values: Vec<f64>,
}

impl MissingRows {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: usize, chunk: &[f64]) {
        self.rows.push(row);
        self.widths.push(chunk.len());
        self.values.extend_from_slice(chunk);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        let mut at = 0;
        self.rows.iter().zip(&self.widths).map(move |(&r, &w)| {
            let chunk = &self.values[at..at + w];
            at += w;
            (r, chunk)
        })
    }
}

/// An `m × p_k` sketch with `m < n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Sketch {
    /// `m` is the product of an `m × n` projection with an `n × p_k` block.
    pub fn new(m: &DMatrix<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), values: m.transpose().as_slice().to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// β ← β + η g.
    Gradient(f64),
    /// β ← maximizer of Q, solved by federated conjugate gradients.
    ClosedForm,
    /// Run the E-step and report statistics; commit nothing.
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchMode {
    /// Within-client products exact, cross-client products sketched.
    Hybrid,
    /// Every product sketched.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchSeeding {
    /// Clients derive one projection per replicate from a pre-shared secret.
    Shared,
    /// Each client draws its own projection.
    Independent,
}

/// Every message that may cross a client boundary.
#[derive(Debug, Clone, PartialEq)]
pub enum ProtocolMessage {
    Hello,
    MissingIndicator { missing: SampleScalars },
    RoundBegin { rule: UpdateRule },
    EStepLocalFit { hbar: SampleScalars },
    EStepQuadForm { v1: f64 },
    EStepBroadcast { d: SampleScalars, r: SampleScalars },
    MStepLocalFit { htilde: SampleScalars },
    MStepCouplingVec { u: ModelVector },
    /// `v` holds `V_i`'s column slice for the recipient, or all of `V_i`
    /// with the recipient's column offset in `at`.
    MStepResidualAndCoupling { e: SampleScalars, v: MissingRows, at: MissingRows },
    MStepPartialProjection { w: MissingRows },
    MStepAggregatedProjection { s: MissingRows },
    VarStepScalar { v5: SampleScalars },
    CgResidualNorm { rr: f64 },
    CgLocalProduct { h: SampleScalars, c: f64 },
    CgMatvec { z: SampleScalars, c: SampleScalars },
    CgCurvature { pap: f64 },
    CgStep { alpha: f64 },
    CgDirection { beta: f64 },
    RoundEnd,
    StepNorm { sq: f64 },
    SketchRequest { replicate: u64, rows: usize, mode: SketchMode, seeding: SketchSeeding },
    SketchBlock { a: Sketch, b: Option<Sketch> },
    LocalGramRequest,
    LocalGram {
        gram: ModelMatrix,
        centred_gram: ModelMatrix,
        cross_e: ModelVector,
        sum: ModelVector,
        centred_sum: ModelVector,
    },
    ReportParameters,
    ParameterReport { beta: ModelVector, mu: ModelVector, sigma: ModelVector },
    Checkpoint,
    Restore,
    Perturb { coord: usize, delta: f64 },
    Converged,
    Shutdown,
}

/// Names of every variant, in declaration order.
pub const MESSAGE_KINDS: &[&str] = &[
    "Hello",
    "MissingIndicator",
    "RoundBegin",
    "EStepLocalFit",
    "EStepQuadForm",
    "EStepBroadcast",
    "MStepLocalFit",
    "MStepCouplingVec",
    "MStepResidualAndCoupling",
    "MStepPartialProjection",
    "MStepAggregatedProjection",
    "VarStepScalar",
    "CgResidualNorm",
    "CgLocalProduct",
    "CgMatvec",
    "CgCurvature",
    "CgStep",
    "CgDirection",
    "RoundEnd",
    "StepNorm",
    "SketchRequest",
    "SketchBlock",
    "LocalGramRequest",
    "LocalGram",
    "ReportParameters",
    "ParameterReport",
    "Checkpoint",
    "Restore",
    "Perturb",
    "Converged",
    "Shutdown",
];

/// Shape classes a payload field can take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadClass {
    Scalar,
    Index,
    ModelVector,
    ModelMatrix,
    SampleScalars,
    MissingRows,
    Sketch,
}

#[derive(Debug, Clone, Copy)]
enum FieldRef<'a> {
    Scalar(f64),
    Index(u64),
    Samples(&'a SampleScalars),
    Model(&'a ModelVector),
    Matrix(&'a ModelMatrix),
    Rows(&'a MissingRows),
    Sketch(&'a Sketch),
}

impl FieldRef<'_> {
    fn class(&self) -> PayloadClass {
        match self {
            FieldRef::Scalar(_) => PayloadClass::Scalar,
            FieldRef::Index(_) => PayloadClass::Index,
            FieldRef::Samples(_) => PayloadClass::SampleScalars,
            FieldRef::Model(_) => PayloadClass::ModelVector,
            FieldRef::Matrix(_) => PayloadClass::ModelMatrix,
            FieldRef::Rows(_) => PayloadClass::MissingRows,
            FieldRef::Sketch(_) => PayloadClass::Sketch,
        }
    }
}

fn rule_fields(rule: &UpdateRule) -> (u64, f64) {
    match rule {
        UpdateRule::Gradient(eta) => (0, *eta),
        UpdateRule::ClosedForm => (1, 0.0),
        UpdateRule::Hold => (2, 0.0),
    }
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        use ProtocolMessage::*;
        match self {
            Hello => "Hello",
            MissingIndicator { .. } => "MissingIndicator",
            RoundBegin { .. } => "RoundBegin",
            EStepLocalFit { .. } => "EStepLocalFit",
            EStepQuadForm { .. } => "EStepQuadForm",
            EStepBroadcast { .. } => "EStepBroadcast",
            MStepLocalFit { .. } => "MStepLocalFit",
            MStepCouplingVec { .. } => "MStepCouplingVec",
            MStepResidualAndCoupling { .. } => "MStepResidualAndCoupling",
            MStepPartialProjection { .. } => "MStepPartialProjection",
            MStepAggregatedProjection { .. } => "MStepAggregatedProjection",
            VarStepScalar { .. } => "VarStepScalar",
            CgResidualNorm { .. } => "CgResidualNorm",
            CgLocalProduct { .. } => "CgLocalProduct",
            CgMatvec { .. } => "CgMatvec",
            CgCurvature { .. } => "CgCurvature",
            CgStep { .. } => "CgStep",
            CgDirection { .. } => "CgDirection",
            RoundEnd => "RoundEnd",
            StepNorm { .. } => "StepNorm",
            SketchRequest { .. } => "SketchRequest",
            SketchBlock { .. } => "SketchBlock",
            LocalGramRequest => "LocalGramRequest",
            LocalGram { .. } => "LocalGram",
            ReportParameters => "ReportParameters",
            ParameterReport { .. } => "ParameterReport",
            Checkpoint => "Checkpoint",
            Restore => "Restore",
            Perturb { .. } => "Perturb",
            Converged => "Converged",
            Shutdown => "Shutdown",
        }
    }

    fn fields(&self) -> Vec<(&'static str, FieldRef<'_>)> {
        use FieldRef as F;
        use ProtocolMessage::*;
        match self {
            Hello | RoundEnd | LocalGramRequest | ReportParameters | Checkpoint | Restore
            | Converged | Shutdown => vec![],
            MissingIndicator { missing } => vec![("missing", F::Samples(missing))],
            RoundBegin { rule } => {
                let (code, eta) = rule_fields(rule);
                vec![("rule", F::Index(code)), ("eta", F::Scalar(eta))]
            }
            EStepLocalFit { hbar } => vec![("hbar", F::Samples(hbar))],
            EStepQuadForm { v1 } => vec![("v1", F::Scalar(*v1))],
            EStepBroadcast { d, r } => vec![("d", F::Samples(d)), ("r", F::Samples(r))],
            MStepLocalFit { htilde } => vec![("htilde", F::Samples(htilde))],
            MStepCouplingVec { u } => vec![("u", F::Model(u))],
            MStepResidualAndCoupling { e, v, at } => {
                vec![("e", F::Samples(e)), ("v", F::Rows(v)), ("at", F::Rows(at))]
            }
            MStepPartialProjection { w } => vec![("w", F::Rows(w))],
            MStepAggregatedProjection { s } => vec![("s", F::Rows(s))],
            VarStepScalar { v5 } => vec![("v5", F::Samples(v5))],
            CgResidualNorm { rr } => vec![("rr", F::Scalar(*rr))],
            CgLocalProduct { h, c } => vec![("h", F::Samples(h)), ("c", F::Scalar(*c))],
            CgMatvec { z, c } => vec![("z", F::Samples(z)), ("c", F::Samples(c))],
            CgCurvature { pap } => vec![("pap", F::Scalar(*pap))],
            CgStep { alpha } => vec![("alpha", F::Scalar(*alpha))],
            CgDirection { beta } => vec![("beta", F::Scalar(*beta))],
            StepNorm { sq } => vec![("sq", F::Scalar(*sq))],
            SketchRequest { replicate, rows, mode, seeding } => vec![
                ("replicate", F::Index(*replicate)),
                ("rows", F::Index(*rows as u64)),
                ("mode", F::Index(matches!(mode, SketchMode::Full) as u64)),
                ("seeding", F::Index(matches!(seeding, SketchSeeding::Independent) as u64)),
            ],
            SketchBlock { a, b } => {
                let mut f = vec![("a", F::Sketch(a))];
                if let Some(b) = b {
                    f.push(("b", F::Sketch(b)));
                }
                f
            }
            LocalGram { gram, centred_gram, cross_e, sum, centred_sum } => vec![
                ("gram", F::Matrix(gram)),
                ("centred_gram", F::Matrix(centred_gram)),
                ("cross_e", F::Model(cross_e)),
                ("sum", F::Model(sum)),
                ("centred_sum", F::Model(centred_sum)),
            ],
            ParameterReport { beta, mu, sigma } => {
                vec![("beta", F::Model(beta)), ("mu", F::Model(mu)), ("sigma", F::Model(sigma))]
            }
            Perturb { coord, delta } => vec![("coord", F::Index(*coord as u64)), ("delta", F::Scalar(*delta))],
        }
    }

    /// Shape classes of this message's payload fields.
    pub fn payload_classes(&self) -> Vec<(&'static str, PayloadClass)> {
        self.fields().into_iter().map(|(n, f)| (n, f.class())).collect()
    }

    /// Check every payload against the shapes allowed for `subject`
    /// (the sending client for uploads, the recipient for downloads).
    pub fn validate(&self, subject: usize, ctx: &SchemaContext) -> Result<()> {
        use ProtocolMessage::*;
        let n = ctx.n;
        let pk = *ctx
            .dims
            .get(subject)
            .ok_or_else(|| VfemError::Schema(format!("unknown client {subject}")))?;
        let p: usize = ctx.dims.iter().sum();
        let fail = |what: String| Err(VfemError::Schema(format!("{}: {what}", self.kind())));
        for (name, field) in self.fields() {
            match field {
                FieldRef::Scalar(v) => {
                    if !v.is_finite() {
                        return fail(format!("{name} is not finite"));
                    }
                }
                FieldRef::Index(_) => {}
                FieldRef::Samples(s) => {
                    if s.len() != n {
                        return fail(format!("{name} has {} entries, expected n = {n}", s.len()));
                    }
                }
                FieldRef::Model(v) => {
                    let expected = match (self, name) {
                        (ParameterReport { .. }, "sigma") => vech_len(pk),
                        _ => pk,
                    };
                    if v.len() != expected {
                        return fail(format!("{name} has length {}, expected {expected}", v.len()));
                    }
                }
                FieldRef::Matrix(m) => {
                    if m.dim != pk || m.values.len() != pk * pk || pk >= n {
                        return fail(format!("{name} is not {pk} × {pk}"));
                    }
                }
                FieldRef::Rows(r) => {
                    if r.widths.iter().sum::<usize>() != r.values.len() || r.rows.len() != r.widths.len() {
                        return fail(format!("{name} is malformed"));
                    }
                    if r.rows.windows(2).any(|w| w[0] >= w[1]) {
                        return fail(format!("{name} rows are not strictly increasing"));
                    }
                    if r.widths.iter().any(|&w| w > p * p) {
                        return fail(format!("{name} has a chunk wider than p²"));
                    }
                    let missing = ctx.missing.get(subject).and_then(|m| m.as_ref());
                    match missing {
                        Some(missing) => {
                            if let Some(&row) = r.rows.iter().find(|&&i| i >= n || !missing[i]) {
                                return fail(format!("{name} names row {row}, which client {subject} observes"));
                            }
                        }
                        None if !r.rows.is_empty() => {
                            return fail(format!("{name} cannot be checked without client {subject}'s mask"));
                        }
                        None => {}
                    }
                }
                FieldRef::Sketch(s) => {
                    if s.rows >= n || s.cols != pk || s.values.len() != s.rows * s.cols {
                        return fail(format!("{name} must be m × {pk} with m < n"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// What a receiver knows about shapes.
#[derive(Debug, Clone)]
pub struct SchemaContext {
    pub n: usize,
    pub dims: Vec<usize>,
    /// Per-client missing indicator, where known.
    pub missing: Vec<Option<Vec<bool>>>,
}

impl SchemaContext {
    pub fn new(n: usize, dims: Vec<usize>) -> Self {
        let k = dims.len();
        Self { n, dims, missing: vec![None; k] }
    }
}

/// A message with its audit header. `from` is 0 for the coordinator and
/// `k + 1` for client `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub t: u64,
    pub round: u32,
    pub from: u32,
    pub body: ProtocolMessage,
}

pub const HEADER_BYTES: usize = 24;

impl Envelope {
    pub fn new(t: u64, round: u32, from: u32, body: ProtocolMessage) -> Self {
        Self { t, round, from, body }
    }

    /// Canonical size: the header plus 8 bytes per number carried.
    pub fn wire_bytes(&self) -> usize {
        let words: usize = self
            .body
            .fields()
            .iter()
            .map(|(_, f)| match f {
                FieldRef::Scalar(_) | FieldRef::Index(_) => 1,
                FieldRef::Samples(s) => s.len(),
                FieldRef::Model(v) => v.len(),
                FieldRef::Matrix(m) => 1 + m.values.len(),
                FieldRef::Rows(r) => 2 * r.rows.len() + r.values.len(),
                FieldRef::Sketch(s) => 2 + s.values.len(),
            })
            .sum();
        HEADER_BYTES + 8 * words
    }

    /// One newline-terminated record, floats with 17 significant digits.
    pub fn encode(&self) -> Result<String> {
        let mut out = String::with_capacity(64 + 24 * (self.wire_bytes() / 8));
        write!(
            out,
            "{{\"t\":{},\"round\":{},\"from\":{},\"kind\":\"{}\",\"payload\":[",
            self.t,
            self.round,
            self.from,
            self.body.kind()
        )
        .unwrap();
        for (j, (name, field)) in self.body.fields().into_iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{{\"field\":\"{name}\",\"data\":").unwrap();
            match field {
                FieldRef::Scalar(v) => push_float(&mut out, v)?,
                FieldRef::Index(v) => write!(out, "{v}").unwrap(),
                FieldRef::Samples(s) => push_floats(&mut out, &s.0)?,
                FieldRef::Model(v) => push_floats(&mut out, &v.0)?,
                FieldRef::Matrix(m) => {
                    write!(out, "{{\"dim\":{},\"values\":", m.dim).unwrap();
                    push_floats(&mut out, &m.values)?;
                    out.push('}');
                }
                FieldRef::Rows(r) => {
                    out.push_str("{\"rows\":");
                    push_indices(&mut out, &r.rows);
                    out.push_str(",\"widths\":");
                    push_indices(&mut out, &r.widths);
                    out.push_str(",\"values\":");
                    push_floats(&mut out, &r.values)?;
                    out.push('}');
                }
                FieldRef::Sketch(s) => {
                    write!(out, "{{\"rows\":{},\"cols\":{},\"values\":", s.rows, s.cols).unwrap();
                    push_floats(&mut out, &s.values)?;
                    out.push('}');
                }
            }
            out.push('}');
        }
        out.push_str("]}\n");
        Ok(out)
    }

    /// Parse one record. Unknown kinds and mistyped fields are rejected;
    /// shapes are checked separately by [`ProtocolMessage::validate`].
    pub fn decode(line: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(line.trim_end())
            .map_err(|e| VfemError::Schema(format!("unparseable record: {e}")))?;
        let header = |key: &str| {
            v.get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| VfemError::Schema(format!("missing header field {key}")))
        };
        let t = header("t")?;
        let round = header("round")? as u32;
        let from = header("from")? as u32;
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| VfemError::Schema("missing kind".into()))?;
        let payload = v
            .get("payload")
            .and_then(Value::as_array)
            .ok_or_else(|| VfemError::Schema("missing payload".into()))?;
        let mut fields = Fields::default();
        for entry in payload {
            let name = entry
                .get("field")
                .and_then(Value::as_str)
                .ok_or_else(|| VfemError::Schema("payload entry without a field name".into()))?;
            let data = entry
                .get("data")
                .ok_or_else(|| VfemError::Schema(format!("field {name} has no data")))?;
            fields.0.push((name.to_string(), data.clone()));
        }
        let body = fields.build(kind)?;
        Ok(Self { t, round, from, body })
    }
}

fn push_float(out: &mut String, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(VfemError::Schema(format!("cannot encode non-finite value {v}")));
    }
    write!(out, "{v:.16e}").unwrap();
    Ok(())
}

fn push_floats(out: &mut String, values: &[f64]) -> Result<()> {
    out.push('[');
    for (j, &v) in values.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        push_float(out, v)?;
    }
    out.push(']');
    Ok(())
}

fn push_indices(out: &mut String, values: &[usize]) {
    out.push('[');
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        write!(out, "{v}").unwrap();
    }
    out.push(']');
}

#[derive(Default)]
struct Fields(Vec<(String, Value)>);

fn bad(what: String) -> VfemError {
    VfemError::Schema(what)
}

fn floats(v: &Value, name: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| bad(format!("{name} is not an array")))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| bad(format!("{name} holds a non-number"))))
        .collect()
}

fn indices(v: &Value, name: &str) -> Result<Vec<usize>> {
    v.as_array()
        .ok_or_else(|| bad(format!("{name} is not an array")))?
        .iter()
        .map(|x| x.as_u64().map(|u| u as usize).ok_or_else(|| bad(format!("{name} holds a non-index"))))
        .collect()
}

impl Fields {
    fn take(&mut self, name: &str) -> Result<Value> {
        let at = self
            .0
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| bad(format!("missing field {name}")))?;
        Ok(self.0.remove(at).1)
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        self.take(name)?.as_f64().ok_or_else(|| bad(format!("{name} is not a number")))
    }

    fn index(&mut self, name: &str) -> Result<u64> {
        self.take(name)?.as_u64().ok_or_else(|| bad(format!("{name} is not an index")))
    }

    fn samples(&mut self, name: &str) -> Result<SampleScalars> {
        Ok(SampleScalars(floats(&self.take(name)?, name)?))
    }

    fn model(&mut self, name: &str) -> Result<ModelVector> {
        Ok(ModelVector(floats(&self.take(name)?, name)?))
    }

    fn object(&mut self, name: &str) -> Result<serde_json::Map<String, Value>> {
        match self.take(name)? {
            Value::Object(m) => Ok(m),
            _ => Err(bad(format!("{name} is not an object"))),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<ModelMatrix> {
        let o = self.object(name)?;
        let dim = o.get("dim").and_then(Value::as_u64).ok_or_else(|| bad(format!("{name}.dim")))? as usize;
        let values = floats(o.get("values").unwrap_or(&Value::Null), name)?;
        if values.len() != dim * dim {
            return Err(bad(format!("{name} is not square")));
        }
        Ok(ModelMatrix { dim, values })
    }

    fn rows(&mut self, name: &str) -> Result<MissingRows> {
        let o = self.object(name)?;
        let get = |k: &str| o.get(k).ok_or_else(|| bad(format!("{name}.{k} missing")));
        Ok(MissingRows {
            rows: indices(get("rows")?, name)?,
            widths: indices(get("widths")?, name)?,
            values: floats(get("values")?, name)?,
        })
    }

    fn sketch(&mut self, name: &str) -> Result<Sketch> {
        let o = self.object(name)?;
        let dim = |k: &str| {
            o.get(k).and_then(Value::as_u64).map(|u| u as usize).ok_or_else(|| bad(format!("{name}.{k}")))
        };
        let (rows, cols) = (dim("rows")?, dim("cols")?);
        let values = floats(o.get("values").unwrap_or(&Value::Null), name)?;
        if values.len() != rows * cols {
            return Err(bad(format!("{name} has the wrong number of values")));
        }
        Ok(Sketch { rows, cols, values })
    }

    fn build(mut self, kind: &str) -> Result<ProtocolMessage> {
        use ProtocolMessage::*;
        let msg = match kind {
            "Hello" => Hello,
            "MissingIndicator" => MissingIndicator { missing: self.samples("missing")? },
            "RoundBegin" => {
                let code = self.index("rule")?;
                let eta = self.scalar("eta")?;
                let rule = match code {
                    0 => UpdateRule::Gradient(eta),
                    1 => UpdateRule::ClosedForm,
                    2 => UpdateRule::Hold,
                    c => return Err(bad(format!("unknown update rule {c}"))),
                };
                RoundBegin { rule }
            }
            "EStepLocalFit" => EStepLocalFit { hbar: self.samples("hbar")? },
            "EStepQuadForm" => EStepQuadForm { v1: self.scalar("v1")? },
            "EStepBroadcast" => EStepBroadcast { d: self.samples("d")?, r: self.samples("r")? },
            "MStepLocalFit" => MStepLocalFit { htilde: self.samples("htilde")? },
            "MStepCouplingVec" => MStepCouplingVec { u: self.model("u")? },
            "MStepResidualAndCoupling" => MStepResidualAndCoupling {
                e: self.samples("e")?,
                v: self.rows("v")?,
                at: self.rows("at")?,
            },
            "MStepPartialProjection" => MStepPartialProjection { w: self.rows("w")? },
            "MStepAggregatedProjection" => MStepAggregatedProjection { s: self.rows("s")? },
            "VarStepScalar" => VarStepScalar { v5: self.samples("v5")? },
            "CgResidualNorm" => CgResidualNorm { rr: self.scalar("rr")? },
            "CgLocalProduct" => CgLocalProduct { h: self.samples("h")?, c: self.scalar("c")? },
            "CgMatvec" => CgMatvec { z: self.samples("z")?, c: self.samples("c")? },
            "CgCurvature" => CgCurvature { pap: self.scalar("pap")? },
            "CgStep" => CgStep { alpha: self.scalar("alpha")? },
            "CgDirection" => CgDirection { beta: self.scalar("beta")? },
            "RoundEnd" => RoundEnd,
            "StepNorm" => StepNorm { sq: self.scalar("sq")? },
            "SketchRequest" => SketchRequest {
                replicate: self.index("replicate")?,
                rows: self.index("rows")? as usize,
                mode: if self.index("mode")? == 1 { SketchMode::Full } else { SketchMode::Hybrid },
                seeding: if self.index("seeding")? == 1 {
                    SketchSeeding::Independent
                } else {
                    SketchSeeding::Shared
                },
            },
            "SketchBlock" => {
                let a = self.sketch("a")?;
                let b = if self.0.iter().any(|(n, _)| n == "b") { Some(self.sketch("b")?) } else { None };
                SketchBlock { a, b }
            }
            "LocalGramRequest" => LocalGramRequest,
            "LocalGram" => LocalGram {
                gram: self.matrix("gram")?,
                centred_gram: self.matrix("centred_gram")?,
                cross_e: self.model("cross_e")?,
                sum: self.model("sum")?,
                centred_sum: self.model("centred_sum")?,
            },
            "ReportParameters" => ReportParameters,
            "ParameterReport" => ParameterReport {
                beta: self.model("beta")?,
                mu: self.model("mu")?,
                sigma: self.model("sigma")?,
            },
            "Checkpoint" => Checkpoint,
            "Restore" => Restore,
            "Perturb" => Perturb { coord: self.index("coord")? as usize, delta: self.scalar("delta")? },
            "Converged" => Converged,
            "Shutdown" => Shutdown,
            other => return Err(bad(format!("unknown message kind {other:?}"))),
        };
        if let Some((name, _)) = self.0.first() {
            return Err(bad(format!("{kind} carries unexpected field {name:?}")));
        }
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> SchemaContext {
        let mut c = SchemaContext::new(4, vec![2, 1]);
        c.missing[1] = Some(vec![false, true, false, true]);
        c
    }

    #[test]
    fn roundtrip_preserves_every_bit() {
        let mut rows = MissingRows::new();
        rows.push(1, &[0.1, 1.0 / 3.0]);
        rows.push(3, &[std::f64::consts::PI, -2.5e-300]);
        let msgs = vec![
            ProtocolMessage::EStepBroadcast {
                d: SampleScalars::from_vec(vec![1.0 / 7.0, 2.0, 3.0, 1e-17]),
                r: SampleScalars::from_vec(vec![-0.0, 5.5, f64::MIN_POSITIVE, 1e300]),
            },
            ProtocolMessage::MStepPartialProjection { w: rows },
            ProtocolMessage::RoundBegin { rule: UpdateRule::Gradient(0.123456789012345678) },
            ProtocolMessage::LocalGram {
                gram: ModelMatrix::new(&DMatrix::identity(1, 1)),
                centred_gram: ModelMatrix::new(&DMatrix::from_element(1, 1, 0.3)),
                cross_e: ModelVector::from_vec(vec![0.1]),
                sum: ModelVector::from_vec(vec![0.2]),
                centred_sum: ModelVector::from_vec(vec![0.0]),
            },
            ProtocolMessage::SketchBlock { a: Sketch::new(&DMatrix::from_element(2, 1, 0.7)), b: None },
            ProtocolMessage::Shutdown,
        ];
        for m in msgs {
            let env = Envelope::new(3, 2, 2, m);
            let line = env.encode().unwrap();
            assert!(line.ends_with('\n'));
            let back = Envelope::decode(&line).unwrap();
            assert_eq!(back, env);
            back.body.validate(1, &ctx()).unwrap();
        }
    }

    #[test]
    fn every_kind_is_listed() {
        let m = ProtocolMessage::Converged;
        assert!(MESSAGE_KINDS.contains(&m.kind()));
        assert_eq!(MESSAGE_KINDS.len(), 31);
    }

    #[test]
    fn raw_block_is_rejected() {
        let block_as_samples = ProtocolMessage::EStepLocalFit { hbar: SampleScalars::from_vec(vec![0.5; 8]) };
        assert!(matches!(block_as_samples.validate(0, &ctx()), Err(VfemError::Schema(_))));

        let mut observed = MissingRows::new();
        observed.push(0, &[1.0]);
        let leak = ProtocolMessage::MStepPartialProjection { w: observed };
        assert!(matches!(leak.validate(1, &ctx()), Err(VfemError::Schema(_))));

        let tall = ProtocolMessage::SketchBlock { a: Sketch::new(&DMatrix::zeros(4, 2)), b: None };
        assert!(matches!(tall.validate(0, &ctx()), Err(VfemError::Schema(_))));

        let line = r#"{"t":0,"round":0,"from":1,"kind":"RawBlock","payload":[{"field":"x","data":[1,2]}]}"#;
        assert!(matches!(Envelope::decode(line), Err(VfemError::Schema(_))));
        let extra = r#"{"t":0,"round":0,"from":1,"kind":"EStepQuadForm","payload":[{"field":"v1","data":1.0},{"field":"x","data":[1,2]}]}"#;
        assert!(matches!(Envelope::decode(extra), Err(VfemError::Schema(_))));
    }

    #[test]
    fn wire_bytes_count_numbers() {
        let env = Envelope::new(0, 0, 1, ProtocolMessage::EStepQuadForm { v1: 1.0 });
        assert_eq!(env.wire_bytes(), HEADER_BYTES + 8);
        let env = Envelope::new(0, 0, 1, ProtocolMessage::EStepLocalFit { hbar: SampleScalars::from_vec(vec![0.0; 10]) });
        assert_eq!(env.wire_bytes(), HEADER_BYTES + 80);
    }

    #[test]
    fn non_finite_values_do_not_encode() {
        let env = Envelope::new(0, 0, 1, ProtocolMessage::EStepQuadForm { v1: f64::NAN });
        assert!(env.encode().is_err());
    }
}
