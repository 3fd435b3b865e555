//! Gaussian-sketch estimates of the cross-product statistics of X̃.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfemError};
use crate::model::{BlockLayout, PseudoComplete};
use crate::protocol::{gaussian_projection, Federation, SketchMode, SketchSeeding};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SketchConfig {
    /// Rows m of each sketch; `None` picks K·⌈ln n⌉.
    pub rows: Option<usize>,
    /// Replicates L; `None` picks the smallest L with L·m ≥ 8K²n·ln n / δ.
    pub replicates: Option<usize>,
    pub delta: f64,
    pub max_replicates: usize,
    pub mode: SketchMode,
    pub seeding: SketchSeeding,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            rows: None,
            replicates: None,
            delta: 100.0,
            max_replicates: 512,
            mode: SketchMode::Hybrid,
            seeding: SketchSeeding::Shared,
        }
    }
}

impl SketchConfig {
    /// `(m, L)` for a dataset of `n` rows split over `kk` clients.
    pub fn resolve(&self, n: usize, kk: usize) -> Result<(usize, usize)> {
        let ln_n = (n.max(2) as f64).ln();
        let m = self.rows.unwrap_or_else(|| kk * ln_n.ceil() as usize).max(1);
        let l = match self.replicates {
            Some(l) => l,
            None => {
                let target = 8.0 * (kk * kk) as f64 * n as f64 * ln_n / self.delta;
                ((target / m as f64).ceil() as usize).clamp(1, self.max_replicates.max(1))
            }
        };
        if m == 0 || l == 0 {
            return Err(VfemError::InvalidConfig("sketch rows and replicates must be positive".into()));
        }
        if !(self.delta > 0.0) {
            return Err(VfemError::InvalidConfig("sketch δ must be positive".into()));
        }
        Ok((m, l))
    }
}

/// M₁ = X̃ᵀX̃, M₂ = X̄ᵀX̄, m₁ = X̃ᵀe, m₂ = X̃ᵀ1, m₃ = X̄ᵀ1 (exact or estimated).
#[derive(Debug, Clone)]
pub struct SufficientStatistics {
    pub gram: DMatrix<f64>,
    /// Only the diagonal blocks are populated in hybrid mode.
    pub centred_gram: DMatrix<f64>,
    pub cross_e: DVector<f64>,
    pub sum: DVector<f64>,
    pub centred_sum: DVector<f64>,
    /// eᵀe, known exactly to the coordinator.
    pub residual_ss: f64,
    /// `(m, L)` when sketched.
    pub sketch: Option<(usize, usize)>,
}

/// Statistics from pooled pseudo-complete data.
pub fn exact_statistics(pc: &PseudoComplete, mu: &[DVector<f64>]) -> SufficientStatistics {
    let x = pc.pooled();
    let n = x.nrows();
    let mut centred = x.clone();
    for k in 0..pc.layout.num_clients() {
        let off = pc.layout.offset(k);
        for (a, m) in mu[k].iter().enumerate() {
            centred.column_mut(off + a).add_scalar_mut(-m);
        }
    }
    let ones = DVector::from_element(n, 1.0);
    SufficientStatistics {
        gram: x.transpose() * &x,
        centred_gram: centred.transpose() * &centred,
        cross_e: x.transpose() * &pc.residuals,
        sum: x.transpose() * &ones,
        centred_sum: centred.transpose() * &ones,
        residual_ss: pc.residuals.norm_squared(),
        sketch: None,
    }
}

/// Run the sketching rounds on a federation whose clients hold the E-step at θ̂.
pub fn sketch_statistics(fed: &mut Federation, cfg: &SketchConfig, seed_value: u64) -> Result<SufficientStatistics> {
    let layout = fed.server().layout().clone();
    let n = fed.server().y().len();
    let kk = layout.num_clients();
    let (m, l) = cfg.resolve(n, kk)?;
    let p = layout.total();
    let residuals = fed
        .server()
        .last_estep()
        .map(|s| s.residuals.clone())
        .ok_or_else(|| VfemError::ProtocolDesync("sketching needs a completed E-step".into()))?;

    let mut gram = DMatrix::zeros(p, p);
    let mut centred_gram = DMatrix::zeros(p, p);
    let mut cross_e = DVector::zeros(p);
    let mut sum = DVector::zeros(p);
    let mut centred_sum = DVector::zeros(p);
    let server_secret = seed::derive(seed_value, &[0x5E70]);
    let ones = DVector::from_element(m, 1.0);
    for rep in 0..l as u64 {
        let (a, b) = fed.server_mut().sketch_replicate(rep, m, cfg.mode, cfg.seeding)?;
        gram += a.transpose() * &a;
        if let Some(b) = b {
            centred_gram += b.transpose() * &b;
            centred_sum += b.transpose() * &ones;
            let s0 = gaussian_projection(server_secret, &[rep, 2], m, n);
            cross_e += a.transpose() * (s0 * &residuals);
            sum += a.transpose() * &ones;
        }
    }
    let scale = 1.0 / l as f64;
    gram *= scale;
    let mut out = SufficientStatistics {
        gram: crate::linalg::symmetrize(&gram),
        centred_gram: crate::linalg::symmetrize(&(centred_gram * scale)),
        cross_e: cross_e * scale,
        sum: sum * scale,
        centred_sum: centred_sum * scale,
        residual_ss: residuals.norm_squared(),
        sketch: Some((m, l)),
    };
    if cfg.mode == SketchMode::Hybrid {
        let grams = fed.server_mut().local_grams()?;
        overwrite_local_blocks(&mut out, &layout, &grams);
    }
    Ok(out)
}

fn overwrite_local_blocks(out: &mut SufficientStatistics, layout: &BlockLayout, grams: &[crate::protocol::LocalGramReport]) {
    for (k, g) in grams.iter().enumerate() {
        let (off, dim) = (layout.offset(k), layout.dim(k));
        out.gram.view_mut((off, off), (dim, dim)).copy_from(&g.gram);
        out.centred_gram.view_mut((off, off), (dim, dim)).copy_from(&g.centred_gram);
        out.cross_e.rows_mut(off, dim).copy_from(&g.cross_e);
        out.sum.rows_mut(off, dim).copy_from(&g.sum);
        out.centred_sum.rows_mut(off, dim).copy_from(&g.centred_sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_follow_the_rule() {
        let (m, l) = SketchConfig::default().resolve(800, 3).unwrap();
        assert_eq!(m, 3 * 7);
        let target = 8.0 * 9.0 * 800.0 * (800f64).ln() / 100.0;
        assert!((l * m) as f64 >= target && (((l - 1) * m) as f64) < target);
    }

    #[test]
    fn replicate_cap_applies() {
        let (_, l) = SketchConfig::default().resolve(1_000_000, 5).unwrap();
        assert_eq!(l, 512);
    }
}
