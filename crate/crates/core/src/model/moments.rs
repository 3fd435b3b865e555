use nalgebra::{DMatrix, DVector, DVectorView};

use super::data::{BlockLayout, MissingMask, VerticalDataset};
use super::params::ModelParameters;
use super::MIN_VARIANCE;
use crate::error::{Result, VfemError};

/// Conditional law of the missing blocks of one sample given `(x_obs, y)`.
///
/// The covariance is kept implicit: block `(a, b)` is
/// `δ_ab Σ_a − u_a u_bᵀ / d` with `u_k = Σ_k β_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    /// Missing clients, ascending.
    pub missing: Vec<usize>,
    /// μ^k_{mis|obs}, one per missing client.
    pub mean: Vec<DVector<f64>>,
    /// u_k = Σ_k β_k, one per missing client.
    pub coupling: Vec<DVector<f64>>,
    /// Σ_k, one per missing client.
    pub blocks: Vec<DMatrix<f64>>,
    /// d = β_misᵀ Σ_mis β_mis + σ².
    pub d: f64,
    /// y − μ_y.
    pub r: f64,
}

impl ConditionalMoments {
    pub fn is_empty(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.iter().map(|m| m.len()).sum()
    }

    /// Block `(a, b)` of Σ_{mis|obs}, indices into `missing`.
    pub fn covariance_block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let mut out = -(&self.coupling[a] * self.coupling[b].transpose()) / self.d;
        if a == b {
            out += &self.blocks[a];
        }
        out
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let q = self.dim();
        let mut out = DMatrix::zeros(q, q);
        let mut ra = 0;
        for a in 0..self.missing.len() {
            let pa = self.mean[a].len();
            let mut rb = 0;
            for b in 0..self.missing.len() {
                let pb = self.mean[b].len();
                out.view_mut((ra, rb), (pa, pb)).copy_from(&self.covariance_block(a, b));
                rb += pb;
            }
            ra += pa;
        }
        out
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.mean.iter().flat_map(|m| m.iter().cloned()))
    }
}

/// Moments of one sample. `blocks[k]` is `None` where client `k` is missing.
pub fn conditional_moments(
    theta: &ModelParameters,
    layout: &BlockLayout,
    blocks: &[Option<DVectorView<'_, f64>>],
    y: f64,
) -> Result<ConditionalMoments> {
    let mut mu_y = 0.0;
    let mut d = theta.sigma2;
    let mut missing = Vec::new();
    let mut coupling = Vec::new();
    for (k, block) in blocks.iter().enumerate() {
        let beta = theta.beta_block(layout, k);
        match block {
            Some(x) => mu_y += x.dot(&beta),
            None => {
                mu_y += theta.mu[k].dot(&beta);
                let u = &theta.sigma[k] * beta;
                d += u.dot(&beta);
                missing.push(k);
                coupling.push(u);
            }
        }
    }
    if !(d > MIN_VARIANCE) {
        return Err(VfemError::DegenerateVariance(format!("d = {d:.3e}")));
    }
    let r = y - mu_y;
    let mean = missing
        .iter()
        .zip(&coupling)
        .map(|(&k, u)| &theta.mu[k] + u * (r / d))
        .collect();
    let blocks = missing.iter().map(|&k| theta.sigma[k].clone()).collect();
    Ok(ConditionalMoments { missing, mean, coupling, blocks, d, r })
}

/// E-step output for the whole dataset at θ^(t).
#[derive(Debug, Clone)]
pub struct PseudoComplete {
    pub layout: BlockLayout,
    pub mask: MissingMask,
    /// x̃ per client, stored `p_k × n`.
    pub xt: Vec<DMatrix<f64>>,
    /// u_k = Σ_k β_k.
    pub coupling: Vec<DVector<f64>>,
    /// v1_k = β_kᵀ Σ_k β_k.
    pub quad: Vec<f64>,
    pub d: DVector<f64>,
    pub r: DVector<f64>,
    /// e_i = y_i − x̃_iᵀβ^(t).
    pub residuals: DVector<f64>,
    pub sigma2: f64,
    pub sigma: Vec<DMatrix<f64>>,
}

impl PseudoComplete {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Σ_{k ∈ mis_i} v1_k.
    pub fn missing_quad(&self, i: usize) -> f64 {
        self.mask.missing_clients(i).map(|k| self.quad[k]).sum()
    }

    /// α_{i[k]} = u_k (1 − Σ_{k'∈mis} v1_{k'} / d_i) for a missing block.
    pub fn alpha(&self, i: usize, k: usize) -> DVector<f64> {
        debug_assert!(self.mask.is_missing(i, k));
        &self.coupling[k] * (1.0 - self.missing_quad(i) / self.d[i])
    }

    /// v4_i = β_misᵀ Σ_{mis|obs} β_mis.
    pub fn v4(&self, i: usize) -> f64 {
        if !self.mask.any_missing(i) {
            return 0.0;
        }
        let s = self.missing_quad(i);
        s - s * s / self.d[i]
    }

    pub fn v4_vector(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| self.v4(i))
    }

    /// Pooled `n × p` matrix X̃.
    pub fn pooled(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut x = DMatrix::zeros(n, self.layout.total());
        for (k, xt) in self.xt.iter().enumerate() {
            x.columns_mut(self.layout.offset(k), self.layout.dim(k)).tr_copy_from(xt);
        }
        x
    }

    /// C = Σ_i Σ̃_{i,mis|obs}, the `p × p` embedding summed over samples.
    pub fn conditional_covariance_sum(&self) -> DMatrix<f64> {
        let p = self.layout.total();
        let kk = self.layout.num_clients();
        let mut c = DMatrix::zeros(p, p);
        // cross[a][b] = Σ_{i : a,b ∈ mis_i} 1/d_i
        let mut cross = vec![vec![0.0; kk]; kk];
        let mut count = vec![0usize; kk];
        for i in 0..self.n() {
            let inv = 1.0 / self.d[i];
            let mis: Vec<usize> = self.mask.missing_clients(i).collect();
            for &a in &mis {
                count[a] += 1;
                for &b in &mis {
                    cross[a][b] += inv;
                }
            }
        }
        for a in 0..kk {
            if count[a] == 0 {
                continue;
            }
            let ra = self.layout.range(a);
            let mut diag = c.view_mut((ra.start, ra.start), (ra.len(), ra.len()));
            diag += &self.sigma[a] * count[a] as f64;
            for b in 0..kk {
                if cross[a][b] == 0.0 {
                    continue;
                }
                let rb = self.layout.range(b);
                let outer = &self.coupling[a] * self.coupling[b].transpose() * cross[a][b];
                let mut blk = c.view_mut((ra.start, rb.start), (ra.len(), rb.len()));
                blk -= outer;
            }
        }
        c
    }

    /// Σ_{i ∈ mis_k} Σ^k_{i,mis|obs} = m_k Σ_k − u_k u_kᵀ Σ 1/d_i.
    pub fn client_conditional_sum(&self, k: usize) -> DMatrix<f64> {
        let mut count = 0usize;
        let mut inv = 0.0;
        for i in 0..self.n() {
            if self.mask.is_missing(i, k) {
                count += 1;
                inv += 1.0 / self.d[i];
            }
        }
        &self.sigma[k] * count as f64 - &self.coupling[k] * self.coupling[k].transpose() * inv
    }

    /// Sample `i`'s conditional moments in structured form.
    pub fn moments(&self, i: usize, theta: &ModelParameters) -> ConditionalMoments {
        let missing: Vec<usize> = self.mask.missing_clients(i).collect();
        ConditionalMoments {
            mean: missing.iter().map(|&k| self.xt[k].column(i).into_owned()).collect(),
            coupling: missing.iter().map(|&k| self.coupling[k].clone()).collect(),
            blocks: missing.iter().map(|&k| theta.sigma[k].clone()).collect(),
            missing,
            d: self.d[i],
            r: self.r[i],
        }
    }
}

/// Impute every masked block with its conditional mean at θ.
pub fn e_step(theta: &ModelParameters, data: &VerticalDataset) -> Result<PseudoComplete> {
    let layout = data.layout().clone();
    let n = data.n();
    let kk = layout.num_clients();
    let mask = data.mask();
    let y = data.y();
    let betas: Vec<DVector<f64>> = (0..kk).map(|k| theta.beta_block(&layout, k).into_owned()).collect();
    let coupling: Vec<DVector<f64>> = (0..kk).map(|k| &theta.sigma[k] * &betas[k]).collect();
    let quad: Vec<f64> = (0..kk).map(|k| coupling[k].dot(&betas[k])).collect();
    let fill: Vec<f64> = (0..kk).map(|k| theta.mu[k].dot(&betas[k])).collect();

    let mut d = DVector::from_element(n, theta.sigma2);
    let mut r = y.clone();
    for k in 0..kk {
        let client = data.client(k);
        for i in 0..n {
            if client.is_missing(i) {
                d[i] += quad[k];
                r[i] -= fill[k];
            } else {
                r[i] -= client.row(i).dot(&betas[k]);
            }
        }
    }
    if let Some(i) = d.iter().position(|&v| !(v > MIN_VARIANCE)) {
        return Err(VfemError::DegenerateVariance(format!("d_{i} = {:.3e}", d[i])));
    }

    let mut xt = Vec::with_capacity(kk);
    let mut residuals = y.clone();
    for k in 0..kk {
        let client = data.client(k);
        let mut block = DMatrix::zeros(layout.dim(k), n);
        for i in 0..n {
            let mut col = block.column_mut(i);
            if client.is_missing(i) {
                col.copy_from(&theta.mu[k]);
                col.axpy(r[i] / d[i], &coupling[k], 1.0);
            } else {
                col.copy_from(&client.row(i));
            }
            residuals[i] -= col.dot(&betas[k]);
        }
        xt.push(block);
    }
    Ok(PseudoComplete {
        layout,
        mask,
        xt,
        coupling,
        quad,
        d,
        r,
        residuals,
        sigma2: theta.sigma2,
        sigma: theta.sigma.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;

    fn scalar_theta() -> (ModelParameters, BlockLayout) {
        let layout = BlockLayout::new(vec![1]).unwrap();
        let theta = ModelParameters::new(
            DVector::from_element(1, 1.0),
            vec![DVector::zeros(1)],
            vec![DMatrix::identity(1, 1)],
            1.0,
        );
        (theta, layout)
    }

    #[test]
    fn scalar_all_missing_case() {
        let (theta, layout) = scalar_theta();
        let m = conditional_moments(&theta, &layout, &[None], 2.0).unwrap();
        assert!((m.mean[0][0] - 1.0).abs() < 1e-15);
        assert!((m.covariance()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_leaves_prior_untouched() {
        let (mut theta, layout) = scalar_theta();
        theta.beta[0] = 0.0;
        theta.mu[0][0] = 0.3;
        let m = conditional_moments(&theta, &layout, &[None], 5.0).unwrap();
        assert_eq!(m.mean[0][0], 0.3);
        assert_eq!(m.covariance()[(0, 0)], 1.0);
    }

    #[test]
    fn observed_sample_has_empty_moments() {
        let (theta, layout) = scalar_theta();
        let x = DVector::from_element(1, 0.4);
        let m = conditional_moments(&theta, &layout, &[Some(x.column(0))], 2.0).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.dim(), 0);
    }

    #[test]
    fn marginal_mean_response_gives_prior_mean() {
        let layout = BlockLayout::new(vec![2, 1]).unwrap();
        let theta = ModelParameters::new(
            DVector::from_vec(vec![0.5, -1.0, 2.0]),
            vec![DVector::from_vec(vec![0.2, 0.1]), DVector::from_element(1, -0.3)],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
                DMatrix::from_element(1, 1, 0.5),
            ],
            0.8,
        );
        let y = theta.joint_mu().dot(&theta.beta);
        let m = conditional_moments(&theta, &layout, &[None, None], y).unwrap();
        assert!((m.mean_vector() - theta.joint_mu()).amax() < 1e-14);
        let shrink = theta.joint_sigma() - m.covariance();
        assert!(symmetric_eigenvalues(&shrink).min() >= -1e-10);
    }

    #[test]
    fn collapsed_variance_is_rejected() {
        let (mut theta, layout) = scalar_theta();
        theta.beta[0] = 0.0;
        theta.sigma2 = 0.0;
        let err = conditional_moments(&theta, &layout, &[None], 1.0).unwrap_err();
        assert!(matches!(err, VfemError::DegenerateVariance(_)));
    }
}
