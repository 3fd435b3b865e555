use nalgebra::{DMatrix, DVector, DVectorView};

use super::data::BlockLayout;
use crate::error::{Result, VfemError};
use crate::linalg::{unvech, vech, vech_len};

/// θ = (β, μ_1..μ_K, Σ_1..Σ_K, σ²).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub beta: DVector<f64>,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub sigma2: f64,
}

impl ModelParameters {
    pub fn new(beta: DVector<f64>, mu: Vec<DVector<f64>>, sigma: Vec<DMatrix<f64>>, sigma2: f64) -> Self {
        Self { beta, mu, sigma, sigma2 }
    }

    pub fn num_clients(&self) -> usize {
        self.mu.len()
    }

    pub fn beta_block<'a>(&'a self, layout: &BlockLayout, k: usize) -> DVectorView<'a, f64> {
        self.beta.rows(layout.offset(k), layout.dim(k))
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::new(self.mu.iter().map(|m| m.len()).collect()).expect("non-empty blocks")
    }

    pub fn validate(&self, layout: &BlockLayout) -> Result<()> {
        let bad = |what: &str| Err(VfemError::InvalidInput(format!("parameters: {what}")));
        if self.beta.len() != layout.total() {
            return bad("β has the wrong length");
        }
        if self.mu.len() != layout.num_clients() || self.sigma.len() != layout.num_clients() {
            return bad("wrong number of client blocks");
        }
        for k in 0..layout.num_clients() {
            let p = layout.dim(k);
            if self.mu[k].len() != p || self.sigma[k].shape() != (p, p) {
                return bad(&format!("client {k} block has the wrong shape"));
            }
        }
        let finite = self.beta.iter().all(|v| v.is_finite())
            && self.mu.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.sigma.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.sigma2.is_finite();
        if !finite {
            return bad("non-finite entry");
        }
        if self.sigma2 <= 0.0 {
            return Err(VfemError::DegenerateVariance(format!("σ² = {}", self.sigma2)));
        }
        Ok(())
    }

    /// Length of the flat θ vector.
    pub fn dim(layout: &BlockLayout) -> usize {
        2 * layout.total() + layout.dims().iter().map(|&p| vech_len(p)).sum::<usize>() + 1
    }

    /// Flat θ: β, then every μ_k, then every vech Σ_k (row-major lower), then σ².
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::new();
        v.extend(self.beta.iter());
        for m in &self.mu {
            v.extend(m.iter());
        }
        for s in &self.sigma {
            v.extend(vech(s));
        }
        v.push(self.sigma2);
        DVector::from_vec(v)
    }

    pub fn from_vector(theta: &DVector<f64>, layout: &BlockLayout) -> Result<Self> {
        if theta.len() != Self::dim(layout) {
            return Err(VfemError::InvalidInput(format!(
                "θ has length {}, expected {}",
                theta.len(),
                Self::dim(layout)
            )));
        }
        let p = layout.total();
        let beta = theta.rows(0, p).into_owned();
        let mut at = p;
        let mu = layout
            .dims()
            .iter()
            .map(|&d| {
                let m = theta.rows(at, d).into_owned();
                at += d;
                m
            })
            .collect();
        let sigma = layout
            .dims()
            .iter()
            .map(|&d| {
                let l = vech_len(d);
                let m = unvech(theta.rows(at, l).as_slice(), d);
                at += l;
                m
            })
            .collect();
        Ok(Self { beta, mu, sigma, sigma2: theta[at] })
    }

    /// Human-readable label of every θ coordinate, 1-based client numbers.
    pub fn coordinate_names(layout: &BlockLayout) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..layout.num_clients() {
            for j in 0..layout.dim(k) {
                names.push(format!("beta[{}.{}]", k + 1, j + 1));
            }
        }
        for k in 0..layout.num_clients() {
            for j in 0..layout.dim(k) {
                names.push(format!("mu[{}.{}]", k + 1, j + 1));
            }
        }
        for k in 0..layout.num_clients() {
            for (a, b) in crate::linalg::vech_indices(layout.dim(k)) {
                names.push(format!("Sigma[{}]({},{})", k + 1, a + 1, b + 1));
            }
        }
        names.push("sigma2".into());
        names
    }

    /// Offset of the μ block and of each vech Σ_k block in the flat vector.
    pub fn offsets(layout: &BlockLayout) -> ThetaOffsets {
        let p = layout.total();
        let mut sigma = Vec::with_capacity(layout.num_clients());
        let mut at = 2 * p;
        for &d in layout.dims() {
            sigma.push(at);
            at += vech_len(d);
        }
        ThetaOffsets { beta: 0, mu: p, sigma, sigma2: at }
    }

    /// Block-diagonal Σ over all clients.
    pub fn joint_sigma(&self) -> DMatrix<f64> {
        let p: usize = self.mu.iter().map(|m| m.len()).sum();
        let mut out = DMatrix::zeros(p, p);
        let mut at = 0;
        for s in &self.sigma {
            let d = s.nrows();
            out.view_mut((at, at), (d, d)).copy_from(s);
            at += d;
        }
        out
    }

    pub fn joint_mu(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.mu.iter().map(|m| m.len()).sum(),
            self.mu.iter().flat_map(|m| m.iter().cloned()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaOffsets {
    pub beta: usize,
    pub mu: usize,
    pub sigma: Vec<usize>,
    pub sigma2: usize,
}
