//! Complete-data information I_oc at θ̂: the negative Hessian of Q(θ | θ̂).
//!
//! Σ_k is parameterized by its lower triangle. A coordinate (a, b) moves
//! the symmetric direction E = e_a e_bᵀ + e_b e_aᵀ (just e_a e_aᵀ on the
//! diagonal).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::sketch::SufficientStatistics;
use crate::error::Result;
use crate::linalg::{inverse, repair_psd, symmetrize, vech_indices};
use crate::model::{BlockLayout, MissingMask, ModelParameters};

/// Smallest eigenvalue allowed in I_oc before clamping.
pub const INFORMATION_FLOOR: f64 = 1e-10;

/// C = Σ_i Cov(x_i | x_obs, y_i), built from per-block quantities only.
pub fn conditional_covariance_total(
    layout: &BlockLayout,
    mask: &MissingMask,
    sigma: &[DMatrix<f64>],
    coupling: &[DVector<f64>],
    d: &DVector<f64>,
) -> DMatrix<f64> {
    let p = layout.total();
    let kk = layout.num_clients();
    let mut weights: BTreeMap<Vec<bool>, (usize, f64)> = BTreeMap::new();
    for i in 0..mask.n() {
        if mask.any_missing(i) {
            let e = weights.entry(mask.row(i).to_vec()).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += 1.0 / d[i];
        }
    }
    let mut c = DMatrix::zeros(p, p);
    for (pattern, (count, inv_d)) in &weights {
        for a in (0..kk).filter(|&a| pattern[a]) {
            let (oa, da) = (layout.offset(a), layout.dim(a));
            let mut diag = c.view_mut((oa, oa), (da, da));
            diag += &sigma[a] * *count as f64;
            for b in (0..kk).filter(|&b| pattern[b]) {
                let (ob, db) = (layout.offset(b), layout.dim(b));
                let mut block = c.view_mut((oa, ob), (da, db));
                block -= &coupling[a] * coupling[b].transpose() * *inv_d;
            }
        }
    }
    c
}

/// The β-block (M₁ + C)/σ².
pub fn beta_information(stats: &SufficientStatistics, cond: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    (&stats.gram + cond) / sigma2
}

fn direction(dim: usize, a: usize, b: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(dim, dim);
    e[(a, b)] = 1.0;
    e[(b, a)] = 1.0;
    e
}

/// Full d × d information in θ order (β, μ, vech Σ, σ²).
pub fn information_matrix(
    stats: &SufficientStatistics,
    theta: &ModelParameters,
    cond: &DMatrix<f64>,
    n: usize,
    layout: &BlockLayout,
) -> Result<DMatrix<f64>> {
    let dim = ModelParameters::dim(layout);
    let offs = ModelParameters::offsets(layout);
    let p = layout.total();
    let nf = n as f64;
    let s2 = theta.sigma2;
    let mut info = DMatrix::zeros(dim, dim);

    info.view_mut((offs.beta, offs.beta), (p, p)).copy_from(&beta_information(stats, cond, s2));
    let cross = (&stats.cross_e - cond * &theta.beta) / (s2 * s2);
    info.view_mut((offs.beta, offs.sigma2), (p, 1)).copy_from(&cross);
    info.view_mut((offs.sigma2, offs.beta), (1, p)).copy_from(&cross.transpose());
    info[(offs.sigma2, offs.sigma2)] =
        -nf / (2.0 * s2 * s2) + (stats.residual_ss + theta.beta.dot(&(cond * &theta.beta))) / (s2 * s2 * s2);

    for k in 0..layout.num_clients() {
        let (off, pk) = (layout.offset(k), layout.dim(k));
        let inv = inverse(&theta.sigma[k], "Σ_k")?;
        let mu_at = offs.mu + off;
        info.view_mut((mu_at, mu_at), (pk, pk)).copy_from(&(&inv * nf));

        let scatter = stats.centred_gram.view((off, off), (pk, pk)) + cond.view((off, off), (pk, pk));
        let inv_scatter = &inv * scatter;
        let inv_m3 = &inv * stats.centred_sum.rows(off, pk);
        let a: Vec<DMatrix<f64>> = vech_indices(pk).map(|(r, c)| &inv * direction(pk, r, c)).collect();
        let s_at = offs.sigma[k];
        for (u, au) in a.iter().enumerate() {
            let mu_sigma = au * &inv_m3;
            info.view_mut((mu_at, s_at + u), (pk, 1)).copy_from(&mu_sigma);
            info.view_mut((s_at + u, mu_at), (1, pk)).copy_from(&mu_sigma.transpose());
            for (v, av) in a.iter().enumerate().skip(u) {
                let uv = au * av;
                let vu = av * au;
                let value = -0.5 * nf * uv.trace() + 0.5 * ((&uv * &inv_scatter).trace() + (&vu * &inv_scatter).trace());
                info[(s_at + u, s_at + v)] = value;
                info[(s_at + v, s_at + u)] = value;
            }
        }
    }
    Ok(info)
}

/// Symmetrize and clamp eigenvalues below [`INFORMATION_FLOOR`].
pub fn repair_information(info: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    repair_psd(&symmetrize(info), INFORMATION_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::sketch::exact_statistics;
    use crate::model::{e_step, q_value, VerticalDataset};

    fn instance() -> (VerticalDataset, ModelParameters) {
        let layout = BlockLayout::new(vec![1, 2]).unwrap();
        let n = 40;
        let x = DMatrix::from_fn(n, 3, |i, j| ((i * 7 + j * 13) % 11) as f64 / 5.0 - 1.0 + 0.1 * j as f64);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] - 0.5 * x[(i, 1)] + 0.3 * x[(i, 2)] + ((i % 5) as f64 - 2.0) * 0.2);
        let mut mask = MissingMask::new(n, 2);
        for i in (0..n).step_by(3) {
            mask.set(i, i % 2, true);
        }
        let data = VerticalDataset::from_pooled(layout, &x, y, &mask).unwrap();
        let theta = ModelParameters::new(
            DVector::from_vec(vec![0.8, -0.4, 0.2]),
            vec![DVector::from_element(1, 0.1), DVector::from_vec(vec![-0.2, 0.3])],
            vec![
                DMatrix::from_element(1, 1, 0.7),
                DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 0.6]),
            ],
            0.35,
        );
        (data, theta)
    }

    #[test]
    fn covariance_total_matches_pooled_sum() {
        let (data, theta) = instance();
        let pc = e_step(&theta, &data).unwrap();
        let c = conditional_covariance_total(data.layout(), &data.mask(), &theta.sigma, &pc.coupling, &pc.d);
        assert!((c - pc.conditional_covariance_sum()).norm() < 1e-12);
    }

    /// −n ∂²Q(θ | θ̂)/∂θ∂θᵀ by central differences.
    #[test]
    fn analytic_blocks_match_numerical_hessian() {
        let (data, theta) = instance();
        let layout = data.layout();
        let pc = e_step(&theta, &data).unwrap();
        let stats = exact_statistics(&pc, &theta.mu);
        let cond = pc.conditional_covariance_sum();
        let info = information_matrix(&stats, &theta, &cond, data.n(), layout).unwrap();

        let t0 = theta.to_vector();
        let q = |v: &DVector<f64>| {
            q_value(&ModelParameters::from_vector(v, layout).unwrap(), &theta, &data).unwrap() * data.n() as f64
        };
        let h = 1e-4;
        let dim = t0.len();
        for i in 0..dim {
            for j in 0..dim {
                let at = |si: f64, sj: f64| {
                    let mut v = t0.clone();
                    v[i] += si * h;
                    v[j] += sj * h;
                    q(&v)
                };
                let num = -(at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h * h);
                let scale = info[(i, j)].abs().max(1.0);
                assert!((num - info[(i, j)]).abs() < 1e-4 * scale, "({i},{j}): {num} vs {}", info[(i, j)]);
            }
        }
    }
}
