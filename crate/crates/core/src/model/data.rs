use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfemError};

/// Column partition of the covariates across clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    client_dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(client_dims: Vec<usize>) -> Result<Self> {
        if client_dims.is_empty() {
            return Err(VfemError::InvalidConfig("layout needs at least one client".into()));
        }
        if let Some(k) = client_dims.iter().position(|&d| d == 0) {
            return Err(VfemError::InvalidConfig(format!("client {k} has no columns")));
        }
        let mut offsets = Vec::with_capacity(client_dims.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for d in &client_dims {
            acc += d;
            offsets.push(acc);
        }
        Ok(Self { client_dims, offsets })
    }

    pub fn num_clients(&self) -> usize {
        self.client_dims.len()
    }

    pub fn dim(&self, k: usize) -> usize {
        self.client_dims[k]
    }

    pub fn dims(&self) -> &[usize] {
        &self.client_dims
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// The client holding `y`.
    pub fn server_client(&self) -> usize {
        0
    }
}

/// Block-level missingness: `M[i][k] = true` when sample `i` has no data on client `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingMask {
    n: usize,
    k: usize,
    bits: Vec<bool>,
}

impl MissingMask {
    pub fn new(n: usize, k: usize) -> Self {
        Self { n, k, bits: vec![false; n * k] }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k) {
            return Err(VfemError::InvalidInput("ragged missing mask".into()));
        }
        Ok(Self { n: rows.len(), k, bits: rows.concat() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_clients(&self) -> usize {
        self.k
    }

    pub fn is_missing(&self, i: usize, k: usize) -> bool {
        self.bits[i * self.k + k]
    }

    pub fn set(&mut self, i: usize, k: usize, missing: bool) {
        self.bits[i * self.k + k] = missing;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.k..(i + 1) * self.k]
    }

    /// Δ_{i,mis}: clients missing for sample `i`, in client order.
    pub fn missing_clients(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().enumerate().filter(|(_, &m)| m).map(|(k, _)| k)
    }

    pub fn observed_clients(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().enumerate().filter(|(_, &m)| !m).map(|(k, _)| k)
    }

    pub fn any_missing(&self, i: usize) -> bool {
        self.row(i).iter().any(|&m| m)
    }

    /// q_i, the dimension of the missing covariates of sample `i`.
    pub fn missing_dim(&self, i: usize, layout: &BlockLayout) -> usize {
        self.missing_clients(i).map(|k| layout.dim(k)).sum()
    }

    pub fn missing_count(&self, k: usize) -> usize {
        (0..self.n).filter(|&i| self.is_missing(i, k)).count()
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.any_missing(i)).collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

/// One client's column block `X_k` (and `y` for the first client).
///
/// Stored sample-major (`p_k × n`) so a sample's block is a contiguous column.
/// Masked samples hold NaN and are never read.
#[derive(Debug, Clone)]
pub struct ClientView {
    index: usize,
    xt: DMatrix<f64>,
    missing: Vec<bool>,
    y: Option<DVector<f64>>,
}

impl ClientView {
    /// `x` is `n × p_k`.
    pub fn new(index: usize, x: DMatrix<f64>, missing: Vec<bool>, y: Option<DVector<f64>>) -> Result<Self> {
        if missing.len() != x.nrows() {
            return Err(VfemError::InvalidInput(format!(
                "client {index}: mask has {} rows, block has {}",
                missing.len(),
                x.nrows()
            )));
        }
        if let Some(y) = &y {
            if y.len() != x.nrows() {
                return Err(VfemError::InvalidInput("response length does not match rows".into()));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(VfemError::InvalidInput("response must be fully observed".into()));
            }
        }
        let mut xt = x.transpose();
        for (i, &m) in missing.iter().enumerate() {
            if m {
                xt.column_mut(i).fill(f64::NAN);
            } else if xt.column(i).iter().any(|v| !v.is_finite()) {
                return Err(VfemError::InvalidInput(format!(
                    "client {index}: row {i} is partially observed; blocks must be all-or-nothing"
                )));
            }
        }
        Ok(Self { index, xt, missing, y })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn n(&self) -> usize {
        self.xt.ncols()
    }

    pub fn dim(&self) -> usize {
        self.xt.nrows()
    }

    pub fn is_missing(&self, i: usize) -> bool {
        self.missing[i]
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn observed_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.missing.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i)
    }

    pub fn observed_count(&self) -> usize {
        self.missing.iter().filter(|&&m| !m).count()
    }

    /// Observed block of sample `i`. Reading a masked row is a contract violation.
    pub fn row(&self, i: usize) -> DVectorView<'_, f64> {
        debug_assert!(!self.missing[i], "read of masked row {i} on client {}", self.index);
        self.xt.column(i)
    }

    pub fn y(&self) -> Option<&DVector<f64>> {
        self.y.as_ref()
    }

    /// `n × p_k` copy, NaN in masked rows.
    pub fn block(&self) -> DMatrix<f64> {
        self.xt.transpose()
    }

    /// Mean and covariance (divisor `m_k`) of the observed rows.
    pub fn observed_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.observed_count();
        if m < 2 {
            return Err(VfemError::InsufficientData(format!(
                "client {} has {m} observed rows, need at least 2",
                self.index
            )));
        }
        let p = self.dim();
        let mut mean = DVector::zeros(p);
        for i in self.observed_rows() {
            mean += self.row(i);
        }
        mean /= m as f64;
        let mut cov = DMatrix::zeros(p, p);
        for i in self.observed_rows() {
            let c = self.row(i) - &mean;
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= m as f64;
        Ok((mean, cov))
    }
}

/// Column-partitioned dataset with block missingness.
#[derive(Debug, Clone)]
pub struct VerticalDataset {
    layout: BlockLayout,
    clients: Vec<ClientView>,
}

impl VerticalDataset {
    pub fn new(layout: BlockLayout, clients: Vec<ClientView>) -> Result<Self> {
        if clients.len() != layout.num_clients() {
            return Err(VfemError::InvalidInput("client count does not match layout".into()));
        }
        let n = clients[0].n();
        if n == 0 {
            return Err(VfemError::InvalidInput("dataset has no samples".into()));
        }
        for (k, c) in clients.iter().enumerate() {
            if c.n() != n {
                return Err(VfemError::InvalidInput(format!("client {k} is not row-aligned")));
            }
            if c.dim() != layout.dim(k) || c.index() != k {
                return Err(VfemError::InvalidInput(format!("client {k} does not match layout")));
            }
        }
        if clients[0].y().is_none() {
            return Err(VfemError::InvalidInput("first client must hold the response".into()));
        }
        Ok(Self { layout, clients })
    }

    /// Split a pooled `n × p` design into client blocks, masking per `mask`.
    pub fn from_pooled(layout: BlockLayout, x: &DMatrix<f64>, y: DVector<f64>, mask: &MissingMask) -> Result<Self> {
        if x.ncols() != layout.total() || x.nrows() != y.len() || mask.n() != y.len() {
            return Err(VfemError::InvalidInput("pooled design does not match layout".into()));
        }
        let clients = (0..layout.num_clients())
            .map(|k| {
                let block = x.columns(layout.offset(k), layout.dim(k)).into_owned();
                let missing = (0..mask.n()).map(|i| mask.is_missing(i, k)).collect();
                let resp = (k == 0).then(|| y.clone());
                ClientView::new(k, block, missing, resp)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layout, clients)
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.clients[0].n()
    }

    pub fn p(&self) -> usize {
        self.layout.total()
    }

    pub fn num_clients(&self) -> usize {
        self.layout.num_clients()
    }

    pub fn client(&self, k: usize) -> &ClientView {
        &self.clients[k]
    }

    pub fn clients(&self) -> &[ClientView] {
        &self.clients
    }

    pub fn y(&self) -> &DVector<f64> {
        self.clients[0].y().expect("first client holds y")
    }

    pub fn mask(&self) -> MissingMask {
        let rows: Vec<Vec<bool>> = (0..self.n())
            .map(|i| self.clients.iter().map(|c| c.is_missing(i)).collect())
            .collect();
        MissingMask::from_rows(&rows).expect("aligned clients")
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.clients.iter().all(|c| !c.is_missing(i)))
            .collect()
    }

    /// Restrict to the given rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let clients = self
            .clients
            .iter()
            .map(|c| {
                let x = DMatrix::from_fn(rows.len(), c.dim(), |r, j| c.xt[(j, rows[r])]);
                let missing = rows.iter().map(|&i| c.missing[i]).collect();
                let y = c.y().map(|y| DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i])));
                ClientView::new(c.index, x, missing, y)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.layout.clone(), clients)
    }

    /// Each client fills its masked rows with the mean of its observed rows.
    pub fn mean_imputed(&self) -> Result<Self> {
        let clients = self
            .clients
            .iter()
            .map(|c| {
                let m = c.observed_count();
                if m == 0 {
                    return Err(VfemError::InsufficientData(format!("client {} has no observed rows", c.index)));
                }
                let mut mean = DVector::zeros(c.dim());
                for i in c.observed_rows() {
                    mean += c.row(i);
                }
                mean /= m as f64;
                let mut x = c.block();
                for i in 0..c.n() {
                    if c.missing[i] {
                        x.row_mut(i).copy_from(&mean.transpose());
                    }
                }
                ClientView::new(c.index, x, vec![false; c.n()], c.y.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.layout.clone(), clients)
    }

    /// Pooled `n × p` design with NaN in masked blocks.
    pub fn pooled_with_nan(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n(), self.p());
        for (k, c) in self.clients.iter().enumerate() {
            x.columns_mut(self.layout.offset(k), c.dim()).copy_from(&c.block());
        }
        x
    }

    /// Sample `i`'s observed blocks (`None` where masked).
    pub fn sample_blocks(&self, i: usize) -> Vec<Option<DVectorView<'_, f64>>> {
        self.clients
            .iter()
            .map(|c| (!c.is_missing(i)).then(|| c.row(i)))
            .collect()
    }
}
