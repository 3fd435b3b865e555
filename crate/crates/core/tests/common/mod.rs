#![allow(dead_code)]

use nalgebra::DVector;
use rand::Rng;
use vfem_core::engine::{adaptive_learning_rate, initialize, FitConfig};
use vfem_core::model::{e_step, first_order_step, q_gradient_beta, ModelParameters, VerticalDataset};
use vfem_core::protocol::{Federation, FederationConfig, UpdateRule};
use vfem_core::datagen::{generate, GenConfig, Generated};
use vfem_core::seed;

/// A random small instance: K ≤ 5, p ≤ 12, n ≤ 500, ρ ≤ 0.5.
pub fn random_instance(s: u64) -> Generated {
    let mut rng = seed::rng(s, &[0xAB]);
    let kk = rng.random_range(1..=5usize);
    let mut dims: Vec<usize> = (0..kk).map(|_| rng.random_range(1..=3usize)).collect();
    while dims.iter().sum::<usize>() > 12 {
        dims.pop();
    }
    let kk = dims.len();
    let mut cfg = GenConfig::standard().with_seed(s).with_n(rng.random_range(60..=500usize));
    cfg.missing_rates = (0..kk).map(|_| rng.random_range(0.0..0.5)).collect();
    cfg.dims = dims;
    generate(&cfg).unwrap()
}

pub fn rel(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub fn rel_m(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Run `iters` federated gradient iterations and compare every recorded
/// quantity against the pooled kernels evaluated at the same θ.
pub fn lockstep(data: &VerticalDataset, theta0: &ModelParameters, cfg: FederationConfig, iters: usize) -> f64 {
    let cfg = FederationConfig { record: true, ..cfg };
    let eta = adaptive_learning_rate(theta0);
    let mut fed = Federation::launch(data, theta0, &cfg).unwrap();
    for _ in 0..iters {
        fed.iterate(UpdateRule::Gradient(eta)).unwrap();
    }
    let out = fed.finish().unwrap();
    let layout = data.layout();
    let mut theta = theta0.clone();
    let mut worst = 0.0f64;
    for t in 0..iters {
        let pc = e_step(&theta, data).unwrap();
        let g = q_gradient_beta(&theta, data).unwrap();
        let (next, loss) = first_order_step(&theta, data, eta).unwrap();
        let srv = &out.server_records[t];
        worst = worst.max(rel(&srv.residuals, &pc.residuals));
        worst = worst.max(rel(&srv.v4, &pc.v4_vector()));
        worst = worst.max((srv.sigma2_after - next.sigma2).abs() / next.sigma2);
        worst = worst.max((srv.sigma2_after - loss).abs() / loss);
        for (k, agent) in out.agents.iter().enumerate() {
            let rec = &agent.records()[t];
            worst = worst.max(rel_m(&rec.pseudo, &pc.xt[k]));
            worst = worst.max(rel(&rec.gradient, &g.rows(layout.offset(k), layout.dim(k)).into_owned()));
            for (i, a) in &rec.alpha {
                worst = worst.max(rel(a, &pc.alpha(*i, k)));
            }
            let expected_rows: Vec<usize> = (0..data.n()).filter(|&i| pc.mask.is_missing(i, k)).collect();
            let got_rows: Vec<usize> = rec.alpha.iter().map(|(i, _)| *i).collect();
            assert_eq!(got_rows, expected_rows, "α rows for client {k}");
            worst = worst.max(rel(&rec.after.beta, &next.beta_block(layout, k).into_owned()));
            worst = worst.max(rel(&rec.after.mu, &next.mu[k]));
            worst = worst.max(rel_m(&rec.after.sigma, &next.sigma[k]));
        }
        theta = next;
    }
    worst
}

pub fn start(data: &VerticalDataset) -> ModelParameters {
    let mut theta = initialize(data, &FitConfig::default()).unwrap();
    // Away from zero so every coupling term is active.
    theta.beta = DVector::from_fn(data.p(), |j, _| 0.3 + 0.1 * j as f64);
    theta
}
