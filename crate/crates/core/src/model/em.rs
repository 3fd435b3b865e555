use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::data::VerticalDataset;
use super::moments::{e_step, PseudoComplete};
use super::params::ModelParameters;
use crate::error::{Result, VfemError};
use crate::linalg::{inverse, log_det_spd, repair_psd, solve_spd_with_ridge, EIGEN_FLOOR};

/// Cross-products of the pseudo-complete data needed by the M-step.
#[derive(Debug, Clone)]
pub struct EmStatistics {
    /// X̃ᵀX̃.
    pub gram: DMatrix<f64>,
    /// X̃ᵀY.
    pub cross_y: DVector<f64>,
    /// C = Σ_i Σ̃_{i,mis|obs}.
    pub cond_cov: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub v4: DVector<f64>,
}

impl EmStatistics {
    pub fn new(pc: &PseudoComplete, y: &DVector<f64>) -> Self {
        let x = pc.pooled();
        Self {
            gram: x.tr_mul(&x),
            cross_y: x.tr_mul(y),
            cond_cov: pc.conditional_covariance_sum(),
            residuals: pc.residuals.clone(),
            v4: pc.v4_vector(),
        }
    }

    pub fn n(&self) -> usize {
        self.residuals.len()
    }

    /// (1/n)[X̃ᵀ(Y − X̃β) − Cβ].
    pub fn gradient_at(&self, beta: &DVector<f64>) -> DVector<f64> {
        (&self.cross_y - &self.gram * beta - &self.cond_cov * beta) / self.n() as f64
    }

    pub fn closed_form_beta(&self) -> Result<DVector<f64>> {
        solve_spd_with_ridge(&(&self.gram + &self.cond_cov), &self.cross_y)
    }

    pub fn loss(&self) -> f64 {
        observed_loss(&self.residuals, &self.v4)
    }
}

/// ℓ = (1/n) Σ (e_i² + v4_i).
pub fn observed_loss(residuals: &DVector<f64>, v4: &DVector<f64>) -> f64 {
    debug_assert_eq!(residuals.len(), v4.len());
    let n = residuals.len() as f64;
    residuals.iter().zip(v4.iter()).map(|(e, v)| e * e + v).sum::<f64>() / n
}

/// μ, Σ and σ² updates. Σ_k is centred at μ^(t); σ² uses β^(t).
fn distributional_update(
    pc: &PseudoComplete,
    theta_t: &ModelParameters,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>, f64) {
    let n = pc.n() as f64;
    let mut mu = Vec::with_capacity(pc.xt.len());
    let mut sigma = Vec::with_capacity(pc.xt.len());
    for (k, xt) in pc.xt.iter().enumerate() {
        mu.push(xt.column_sum() / n);
        let mut centred = xt.clone();
        for mut col in centred.column_iter_mut() {
            col -= &theta_t.mu[k];
        }
        let s = (&centred * centred.transpose() + pc.client_conditional_sum(k)) / n;
        sigma.push(repair_psd(&s, EIGEN_FLOOR).0);
    }
    let sigma2 = observed_loss(&pc.residuals, &pc.v4_vector());
    (mu, sigma, sigma2)
}

/// One full EM iteration: E-step at θ^(t), then the closed-form maximizer.
pub fn closed_form_m_step(theta_t: &ModelParameters, data: &VerticalDataset) -> Result<ModelParameters> {
    let pc = e_step(theta_t, data)?;
    let stats = EmStatistics::new(&pc, data.y());
    let beta = stats.closed_form_beta()?;
    let (mu, sigma, sigma2) = distributional_update(&pc, theta_t);
    Ok(ModelParameters::new(beta, mu, sigma, sigma2))
}

/// First-order EM iteration: β moves by `eta · g`, the rest as in the closed form.
///
/// Also returns the loss ℓ computed from the iteration-t residuals.
pub fn first_order_step(
    theta_t: &ModelParameters,
    data: &VerticalDataset,
    eta: f64,
) -> Result<(ModelParameters, f64)> {
    let pc = e_step(theta_t, data)?;
    let stats = EmStatistics::new(&pc, data.y());
    let beta = &theta_t.beta + stats.gradient_at(&theta_t.beta) * eta;
    let (mu, sigma, sigma2) = distributional_update(&pc, theta_t);
    Ok((ModelParameters::new(beta, mu, sigma, sigma2), stats.loss()))
}

/// The β-gradient at β^(t), scaled by σ² (the form used by the update rule).
pub fn q_gradient_beta(theta_t: &ModelParameters, data: &VerticalDataset) -> Result<DVector<f64>> {
    q_gradient_beta_at(&theta_t.beta, theta_t, data)
}

/// σ² · ∂Q(β | θ^(t))/∂β at an arbitrary β.
pub fn q_gradient_beta_at(
    beta: &DVector<f64>,
    theta_t: &ModelParameters,
    data: &VerticalDataset,
) -> Result<DVector<f64>> {
    let pc = e_step(theta_t, data)?;
    Ok(EmStatistics::new(&pc, data.y()).gradient_at(beta))
}

/// Q(θ | θ^(t)) without additive constants.
pub fn q_value(theta: &ModelParameters, theta_t: &ModelParameters, data: &VerticalDataset) -> Result<f64> {
    let pc = e_step(theta_t, data)?;
    q_value_with(theta, &pc, data.y())
}

pub(crate) fn q_value_with(theta: &ModelParameters, pc: &PseudoComplete, y: &DVector<f64>) -> Result<f64> {
    let layout = &pc.layout;
    let n = pc.n() as f64;
    let kk = layout.num_clients();
    if !(theta.sigma2 > 0.0) {
        return Err(VfemError::DegenerateVariance(format!("σ² = {}", theta.sigma2)));
    }
    let mut log_dets = 0.0;
    let mut inverses = Vec::with_capacity(kk);
    for k in 0..kk {
        log_dets += log_det_spd(&theta.sigma[k]).ok_or(VfemError::SingularCovariance { client: k })?;
        inverses.push(inverse(&theta.sigma[k], "Σ_k").map_err(|_| VfemError::SingularCovariance { client: k })?);
    }
    let betas: Vec<DVector<f64>> = (0..kk).map(|k| theta.beta_block(layout, k).into_owned()).collect();
    let old_quad: Vec<f64> = (0..kk).map(|k| betas[k].dot(&(&pc.sigma[k] * &betas[k]))).collect();
    let cross: Vec<f64> = (0..kk).map(|k| pc.coupling[k].dot(&betas[k])).collect();
    let base_trace: Vec<f64> = (0..kk).map(|k| (&inverses[k] * &pc.sigma[k]).trace()).collect();
    let coupling_norm: Vec<f64> = (0..kk).map(|k| pc.coupling[k].dot(&(&inverses[k] * &pc.coupling[k]))).collect();

    let mut rss = 0.0;
    let mut cond = 0.0;
    let mut maha = 0.0;
    let mut trace = 0.0;
    for i in 0..pc.n() {
        let mut fit = 0.0;
        for k in 0..kk {
            let x = pc.xt[k].column(i);
            fit += x.dot(&betas[k]);
            let c = x - &theta.mu[k];
            maha += c.dot(&(&inverses[k] * &c));
        }
        rss += (y[i] - fit).powi(2);
        let mut quad = 0.0;
        let mut proj = 0.0;
        for k in pc.mask.missing_clients(i) {
            quad += old_quad[k];
            proj += cross[k];
            trace += base_trace[k] - coupling_norm[k] / pc.d[i];
        }
        cond += quad - proj * proj / pc.d[i];
    }
    Ok(-0.5 * theta.sigma2.ln() - 0.5 * log_dets
        - (rss + cond) / (2.0 * n * theta.sigma2)
        - (maha + trace) / (2.0 * n))
}

/// Observed-data log-likelihood (sum over samples, constants included).
pub fn observed_loglik(theta: &ModelParameters, data: &VerticalDataset) -> Result<f64> {
    let layout = data.layout();
    let kk = layout.num_clients();
    let mut log_dets = Vec::with_capacity(kk);
    let mut inverses = Vec::with_capacity(kk);
    for k in 0..kk {
        log_dets.push(log_det_spd(&theta.sigma[k]).ok_or(VfemError::SingularCovariance { client: k })?);
        inverses.push(inverse(&theta.sigma[k], "Σ_k").map_err(|_| VfemError::SingularCovariance { client: k })?);
    }
    let betas: Vec<DVector<f64>> = (0..kk).map(|k| theta.beta_block(layout, k).into_owned()).collect();
    let quad: Vec<f64> = (0..kk).map(|k| betas[k].dot(&(&theta.sigma[k] * &betas[k]))).collect();
    let ln2pi = (2.0 * PI).ln();
    let y = data.y();
    let mut total = 0.0;
    for i in 0..data.n() {
        let mut mean = 0.0;
        let mut var = theta.sigma2;
        for k in 0..kk {
            let client = data.client(k);
            if client.is_missing(i) {
                mean += theta.mu[k].dot(&betas[k]);
                var += quad[k];
            } else {
                let x = client.row(i);
                mean += x.dot(&betas[k]);
                let c = x - &theta.mu[k];
                total -= 0.5 * (layout.dim(k) as f64 * ln2pi + log_dets[k] + c.dot(&(&inverses[k] * &c)));
            }
        }
        if !(var > 0.0) {
            return Err(VfemError::DegenerateVariance(format!("marginal variance of y_{i} is {var}")));
        }
        total -= 0.5 * (ln2pi + var.ln() + (y[i] - mean).powi(2) / var);
    }
    Ok(total)
}

/// Least squares via thin QR.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() < x.ncols() {
        return Err(VfemError::InsufficientData(format!(
            "{} rows for {} coefficients",
            x.nrows(),
            x.ncols()
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * scale) {
        return Err(VfemError::SingularSystem("design is rank deficient".into()));
    }
    let qty = qr.q().tr_mul(y);
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| VfemError::SingularSystem("design is rank deficient".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockLayout, MissingMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, dims: Vec<usize>, rate: f64) -> (VerticalDataset, ModelParameters) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = BlockLayout::new(dims).unwrap();
        let p = layout.total();
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let beta = DVector::from_fn(p, |j, _| if j % 2 == 0 { 1.0 } else { -0.5 });
        let y = &x * &beta + DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let mut mask = MissingMask::new(n, layout.num_clients());
        for i in 0..n {
            for k in 0..layout.num_clients() {
                if i > 3 && rng.random::<f64>() < rate {
                    mask.set(i, k, true);
                }
            }
        }
        let data = VerticalDataset::from_pooled(layout.clone(), &x, y, &mask).unwrap();
        let theta = ModelParameters::new(
            DVector::from_fn(p, |_, _| rng.random::<f64>() - 0.5),
            layout.dims().iter().map(|&d| DVector::from_fn(d, |_, _| 0.1 * rng.random::<f64>())).collect(),
            layout
                .dims()
                .iter()
                .map(|&d| DMatrix::identity(d, d) * 0.4 + DMatrix::from_element(d, d, 0.05))
                .collect(),
            0.3,
        );
        (data, theta)
    }

    #[test]
    fn complete_data_m_step_is_ols() {
        let (data, theta) = instance(1, 60, vec![2, 3], 0.0);
        let next = closed_form_m_step(&theta, &data).unwrap();
        let x = data.pooled_with_nan();
        let b = ols(&x, data.y()).unwrap();
        assert!((&next.beta - &b).amax() < 1e-10);
        let rss_at_old = (data.y() - &x * &theta.beta).norm_squared() / 60.0;
        assert!((next.sigma2 - rss_at_old).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_variance_update() {
        let (data, theta) = instance(2, 80, vec![1, 2, 2], 0.3);
        let (next, loss) = first_order_step(&theta, &data, 0.1).unwrap();
        assert!((next.sigma2 - loss).abs() < 1e-14);
        let r = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(observed_loss(&r, &DVector::zeros(2)), 1.0);
    }

    #[test]
    fn gradient_vanishes_at_closed_form_beta() {
        let (data, theta) = instance(3, 70, vec![2, 1, 2], 0.4);
        let next = closed_form_m_step(&theta, &data).unwrap();
        let g = q_gradient_beta_at(&next.beta, &theta, &data).unwrap();
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn gradient_is_scaled_derivative_of_q() {
        let (data, theta) = instance(4, 50, vec![2, 2, 2], 0.3);
        let g = q_gradient_beta(&theta, &data).unwrap();
        let h = 1e-5;
        for j in 0..theta.beta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up.beta[j] += h;
            dn.beta[j] -= h;
            let fd = (q_value(&up, &theta, &data).unwrap() - q_value(&dn, &theta, &data).unwrap()) / (2.0 * h);
            let fd = fd * theta.sigma2;
            assert!((fd - g[j]).abs() <= 1e-6 * g.amax(), "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn em_does_not_decrease_likelihood() {
        let (data, mut theta) = instance(5, 90, vec![2, 2], 0.35);
        let mut prev = observed_loglik(&theta, &data).unwrap();
        for _ in 0..15 {
            theta = closed_form_m_step(&theta, &data).unwrap();
            let ll = observed_loglik(&theta, &data).unwrap();
            assert!(ll >= prev - 1e-9, "{ll} < {prev}");
            prev = ll;
        }
    }

    #[test]
    fn m_step_does_not_decrease_q() {
        let (data, theta) = instance(6, 90, vec![1, 3], 0.3);
        let next = closed_form_m_step(&theta, &data).unwrap();
        assert!(q_value(&next, &theta, &data).unwrap() >= q_value(&theta, &theta, &data).unwrap());
    }

    #[test]
    fn ols_rejects_collinear_design() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(ols(&x, &y), Err(VfemError::SingularSystem(_))));
    }
}
