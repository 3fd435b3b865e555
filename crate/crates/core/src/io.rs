//! Dataset directories, parameter files and typed reports.
//!
//! A dataset directory holds `layout.json` and one `client_<k>.csv` per
//! client (k from 1). Client 1's file carries `y` as its first column.
//! Masked rows are blank across the whole block.

use std::fs;
use std::io::BufRead;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, FitResult};
use crate::error::{Result, VfemError};
use crate::inference::{CoefficientRow, InferenceReport, InferenceScope};
use crate::model::{BlockLayout, ClientView, ModelParameters, VerticalDataset};
use crate::protocol::{Envelope, Traffic};

pub const LAYOUT_FILE: &str = "layout.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const RESPONSE: &str = "y";

pub fn client_file(k: usize) -> String {
    format!("client_{}.csv", k + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    pub num_clients: usize,
    pub dims: Vec<usize>,
    /// 1-based index of the client that hosts the coordinator.
    pub server_client: usize,
    pub columns: Vec<Vec<String>>,
    /// Fraction of masked rows per client.
    pub missing_rates: Vec<f64>,
}

impl Manifest {
    pub fn describe(data: &VerticalDataset) -> Self {
        let layout = data.layout();
        let n = data.n();
        Self {
            n,
            num_clients: layout.num_clients(),
            dims: layout.dims().to_vec(),
            server_client: layout.server_client() + 1,
            columns: (0..layout.num_clients())
                .map(|k| (0..layout.dim(k)).map(|j| format!("x{}_{}", k + 1, j + 1)).collect())
                .collect(),
            missing_rates: (0..layout.num_clients())
                .map(|k| (n - data.client(k).observed_count()) as f64 / n as f64)
                .collect(),
        }
    }

    fn check(&self) -> Result<BlockLayout> {
        let bad = |m: String| Err(VfemError::InvalidInput(format!("{LAYOUT_FILE}: {m}")));
        if self.dims.len() != self.num_clients || self.columns.len() != self.num_clients {
            return bad("client count does not match dims or columns".into());
        }
        if self.server_client != 1 {
            return bad(format!("server client must be 1, found {}", self.server_client));
        }
        for (k, cols) in self.columns.iter().enumerate() {
            if cols.len() != self.dims[k] {
                return bad(format!("client {} lists {} columns for {} features", k + 1, cols.len(), self.dims[k]));
            }
        }
        BlockLayout::new(self.dims.clone())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| VfemError::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_dataset(dir: &Path, data: &VerticalDataset) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::describe(data);
    for k in 0..data.num_clients() {
        let client = data.client(k);
        let mut w = csv::Writer::from_path(dir.join(client_file(k)))?;
        let mut header: Vec<&str> = Vec::new();
        if k == 0 {
            header.push(RESPONSE);
        }
        header.extend(manifest.columns[k].iter().map(String::as_str));
        w.write_record(&header)?;
        for i in 0..data.n() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if k == 0 {
                rec.push(data.y()[i].to_string());
            }
            if client.is_missing(i) {
                rec.extend(std::iter::repeat_n(String::new(), client.dim()));
            } else {
                rec.extend(client.row(i).iter().map(f64::to_string));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    write_json(&dir.join(LAYOUT_FILE), &manifest)?;
    Ok(manifest)
}

fn parse_cell(cell: &str, file: &str, row: usize) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| VfemError::InvalidInput(format!("{file} row {}: {cell:?} is not a finite number", row + 1)))
}

pub fn read_dataset(dir: &Path) -> Result<(VerticalDataset, Manifest)> {
    let manifest: Manifest = read_json(&dir.join(LAYOUT_FILE))?;
    let layout = manifest.check()?;
    let mut clients = Vec::with_capacity(manifest.num_clients);
    for k in 0..manifest.num_clients {
        let file = client_file(k);
        let mut r = csv::Reader::from_path(dir.join(&file))?;
        let mut expected: Vec<String> = Vec::new();
        if k == 0 {
            expected.push(RESPONSE.into());
        }
        expected.extend(manifest.columns[k].iter().cloned());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != expected {
            return Err(VfemError::InvalidInput(format!("{file}: header {header:?}, expected {expected:?}")));
        }
        let pk = manifest.dims[k];
        let shift = usize::from(k == 0);
        let mut x = Vec::with_capacity(manifest.n * pk);
        let mut y = Vec::new();
        let mut missing = Vec::with_capacity(manifest.n);
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if k == 0 {
                y.push(parse_cell(&rec[0], &file, i)?);
            }
            let cells: Vec<&str> = (0..pk).map(|j| rec[shift + j].trim()).collect();
            let blank = cells.iter().filter(|c| c.is_empty()).count();
            if blank == pk {
                missing.push(true);
                x.extend(std::iter::repeat_n(f64::NAN, pk));
            } else if blank == 0 {
                missing.push(false);
                for c in cells {
                    x.push(parse_cell(c, &file, i)?);
                }
            } else {
                return Err(VfemError::InvalidInput(format!("{file} row {}: block is partially blank", i + 1)));
            }
        }
        if missing.len() != manifest.n {
            return Err(VfemError::InvalidInput(format!("{file}: {} rows, manifest says {}", missing.len(), manifest.n)));
        }
        let block = DMatrix::from_row_slice(manifest.n, pk, &x);
        let resp = (k == 0).then(|| DVector::from_vec(y));
        clients.push(ClientView::new(k, block, missing, resp)?);
    }
    Ok((VerticalDataset::new(layout, clients)?, manifest))
}

/// θ in a readable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterFile {
    pub dims: Vec<usize>,
    pub beta: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    /// Each Σ_k row by row.
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub sigma2: f64,
}

impl ParameterFile {
    pub fn from_parameters(theta: &ModelParameters) -> Self {
        Self {
            dims: theta.mu.iter().map(|m| m.len()).collect(),
            beta: theta.beta.iter().copied().collect(),
            mu: theta.mu.iter().map(|m| m.iter().copied().collect()).collect(),
            sigma: theta
                .sigma
                .iter()
                .map(|s| s.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            sigma2: theta.sigma2,
        }
    }

    pub fn to_parameters(&self) -> Result<ModelParameters> {
        let layout = BlockLayout::new(self.dims.clone())?;
        let sigma = self
            .sigma
            .iter()
            .map(|rows| {
                let p = rows.len();
                if rows.iter().any(|r| r.len() != p) {
                    return Err(VfemError::InvalidInput("Σ_k must be square".into()));
                }
                Ok(DMatrix::from_row_iterator(p, p, rows.iter().flatten().copied()))
            })
            .collect::<Result<Vec<_>>>()?;
        let theta = ModelParameters::new(
            DVector::from_vec(self.beta.clone()),
            self.mu.iter().map(|m| DVector::from_vec(m.clone())).collect(),
            sigma,
            self.sigma2,
        );
        theta.validate(&layout)?;
        Ok(theta)
    }
}

pub fn write_parameters(path: &Path, theta: &ModelParameters) -> Result<()> {
    write_json(path, &ParameterFile::from_parameters(theta))
}

pub fn read_parameters(path: &Path) -> Result<ModelParameters> {
    read_json::<ParameterFile>(path)?.to_parameters()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub messages: u64,
    pub bytes: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

impl From<Traffic> for TrafficReport {
    fn from(t: Traffic) -> Self {
        Self { messages: t.messages(), bytes: t.bytes(), bytes_down: t.down.bytes, bytes_up: t.up.bytes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub engine: String,
    pub converged: bool,
    pub iterations: usize,
    /// Step size of the first-order update; absent for the oracle.
    pub learning_rate: Option<f64>,
    pub halvings: usize,
    pub final_loss: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub theta: ParameterFile,
    pub traffic: Option<TrafficReport>,
}

impl FitReport {
    pub fn new(r: &FitResult) -> Self {
        Self {
            engine: match r.engine {
                Engine::Federated => "federated".into(),
                Engine::Oracle => "oracle".into(),
            },
            converged: r.converged,
            iterations: r.iterations,
            learning_rate: r.eta.is_finite().then_some(r.eta),
            halvings: r.halvings,
            final_loss: r.loss_trace.last().copied(),
            loss_trace: r.loss_trace.clone(),
            theta: ParameterFile::from_parameters(&r.theta),
            traffic: r.traffic.map(Into::into),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "engine {}  converged {}  iterations {}  halvings {}\n",
            self.engine, self.converged, self.iterations, self.halvings
        );
        if let Some(eta) = self.learning_rate {
            out.push_str(&format!("learning rate {eta:.6}\n"));
        }
        if let Some(l) = self.final_loss {
            out.push_str(&format!("final loss {l:.8}  sigma2 {:.6}\n", self.theta.sigma2));
        }
        if let Some(t) = &self.traffic {
            out.push_str(&format!("messages {}  bytes {}\n", t.messages, t.bytes));
        }
        let layout = BlockLayout::new(self.theta.dims.clone()).expect("dims from a fit");
        let names = ModelParameters::coordinate_names(&layout);
        for (name, b) in names.iter().zip(&self.theta.beta) {
            out.push_str(&format!("{name:<12} {b:>12.6}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub scope: InferenceScope,
    pub coefficients: Vec<CoefficientRow>,
    pub gamma_spectral_radius: f64,
    pub information_repaired: bool,
    pub covariance_repaired: bool,
    pub sketch_rows: Option<usize>,
    pub sketch_replicates: Option<usize>,
    pub traffic: Option<TrafficReport>,
}

impl InferenceSummary {
    pub fn new(r: &InferenceReport) -> Self {
        Self {
            scope: r.scope,
            coefficients: r.coefficients.clone(),
            gamma_spectral_radius: r.gamma_spectral_radius,
            information_repaired: r.information_repaired,
            covariance_repaired: r.covariance_repaired,
            sketch_rows: r.sketch.map(|s| s.0),
            sketch_replicates: r.sketch.map(|s| s.1),
            traffic: r.traffic.map(Into::into),
        }
    }
}

pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    write_json(path, report)
}

pub fn read_report<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    read_json(path)
}

/// Parse every record of a message trace.
pub fn read_trace(path: &Path) -> Result<Vec<Envelope>> {
    let file = fs::File::open(path)?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| Envelope::decode(&l?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};

    #[test]
    fn dataset_roundtrips_bit_for_bit() {
        let g = generate(&GenConfig::standard().with_n(50).with_seed(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &g.data).unwrap();
        let (back, manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest.n, 50);
        assert_eq!(back.mask(), g.data.mask());
        assert_eq!(back.y(), g.data.y());
        let (a, b) = (back.pooled_with_nan(), g.data.pooled_with_nan());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan())));
    }

    #[test]
    fn parameters_roundtrip() {
        let theta = GenConfig::standard().truth().unwrap();
        let back = ParameterFile::from_parameters(&theta).to_parameters().unwrap();
        assert_eq!(back, theta);
    }

    #[test]
    fn partial_block_is_rejected() {
        let g = generate(&GenConfig::standard().with_n(20).with_rate(0.0).with_seed(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &g.data).unwrap();
        let path = dir.path().join(client_file(1));
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let first = lines[1].split(',').next().unwrap().to_string();
        lines[1] = format!("{first},");
        fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(VfemError::InvalidInput(_))));
    }
}
