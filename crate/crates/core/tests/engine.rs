use nalgebra::DVector;
use vfem_core::datagen::{generate, GenConfig};
use vfem_core::engine::{fit, predict, Engine, FitConfig, InitStrategy, LearningRate};
use vfem_core::model::{observed_loglik, ols};
use vfem_core::protocol::{FederationConfig, TransportKind};
use vfem_core::VfemError;

fn instance(n: usize, dims: Vec<usize>, rate: f64, seed: u64) -> vfem_core::datagen::Generated {
    let mut cfg = GenConfig::standard().with_seed(seed).with_n(n);
    cfg.dims = dims;
    generate(&cfg.with_rate(rate)).unwrap()
}

#[test]
fn engines_reach_the_same_stationary_point() {
    let g = instance(500, vec![4, 3, 3], 0.3, 7);
    let fed = fit(&g.data, &FitConfig::default()).unwrap();
    let orc = fit(&g.data, &FitConfig { engine: Engine::Oracle, ..FitConfig::default() }).unwrap();
    assert!(fed.converged && orc.converged);
    let gap = (fed.theta.to_vector() - orc.theta.to_vector()).norm();
    assert!(gap < 1e-4, "gap {gap:e}");
}

#[test]
fn oracle_likelihood_never_decreases() {
    let g = instance(200, vec![2, 3, 2], 0.4, 8);
    let mut theta = vfem_core::engine::initialize(&g.data, &FitConfig::default()).unwrap();
    let mut last = observed_loglik(&theta, &g.data).unwrap();
    for _ in 0..30 {
        theta = vfem_core::model::closed_form_m_step(&theta, &g.data).unwrap();
        let now = observed_loglik(&theta, &g.data).unwrap();
        assert!(now >= last - 1e-9, "{now} < {last}");
        last = now;
    }
}

#[test]
fn complete_data_fit_is_ols() {
    let g = instance(300, vec![2, 2, 2], 0.0, 3);
    let b_ols = ols(&g.data.pooled_with_nan(), g.data.y()).unwrap();
    for engine in [Engine::Federated, Engine::Oracle] {
        let r = fit(&g.data, &FitConfig { engine, tolerance: 1e-14, ..FitConfig::default() }).unwrap();
        assert!((&r.theta.beta - &b_ols).norm() < 1e-6, "{engine:?}");
    }
}

#[test]
fn socket_fit_matches_in_process() {
    let g = instance(150, vec![2, 1, 2], 0.3, 5);
    let base = FitConfig { max_iters: 40, ..FitConfig::default() };
    let a = fit(&g.data, &base).unwrap();
    let sock = FitConfig { federation: FederationConfig::default().threaded(TransportKind::Socket), ..base };
    let b = fit(&g.data, &sock).unwrap();
    assert_eq!(a.theta.to_vector(), b.theta.to_vector());
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn complete_case_start_is_accepted() {
    let g = instance(400, vec![2, 2, 2], 0.2, 6);
    let cfg = FitConfig { init: InitStrategy::CompleteCaseOls, ..FitConfig::default() };
    let r = fit(&g.data, &cfg).unwrap();
    assert!(r.converged);
    let zero = fit(&g.data, &FitConfig::default()).unwrap();
    assert!(r.iterations <= zero.iterations);
}

#[test]
fn oversized_step_is_halved_back_to_convergence() {
    let g = instance(300, vec![2, 2, 2], 0.2, 10);
    let cfg = FitConfig { learning_rate: LearningRate::Constant(3.0), ..FitConfig::default() };
    let r = fit(&g.data, &cfg).unwrap();
    assert!(r.halvings > 0);
    assert!(r.converged, "halvings {} eta {}", r.halvings, r.eta);
}

#[test]
fn fully_missing_row_is_predicted_by_the_mean() {
    let g = instance(200, vec![2, 2], 0.3, 12);
    let r = fit(&g.data, &FitConfig::default()).unwrap();
    let all_missing: Vec<usize> =
        (0..g.data.n()).filter(|&i| (0..2).all(|k| g.data.mask().is_missing(i, k))).collect();
    assert!(!all_missing.is_empty());
    let pred = predict(&r.theta, &g.data);
    let mu = DVector::from_iterator(4, r.theta.mu.iter().flat_map(|m| m.iter().copied()));
    for i in all_missing {
        assert!((pred.fitted[i] - mu.dot(&r.theta.beta)).abs() < 1e-12);
    }
}

#[test]
fn missing_counts_track_the_rate() {
    let g = instance(20_000, vec![1, 1, 1], 0.3, 42);
    for k in 0..3 {
        let m = g.data.client(k).observed_count() as f64;
        assert!((m / 20_000.0 - 0.7).abs() < 0.015);
    }
}

#[test]
fn too_few_complete_rows_for_cc_start() {
    let g = instance(30, vec![3, 3, 3], 0.45, 1);
    let cfg = FitConfig { init: InitStrategy::CompleteCaseOls, ..FitConfig::default() };
    match fit(&g.data, &cfg) {
        Err(VfemError::InsufficientCompleteCases { .. }) => {}
        other => assert!(other.is_ok(), "{other:?}"),
    }
}

#[test]
fn starting_point_does_not_change_the_limit() {
    for seed in [21, 22, 23] {
        let g = instance(400, vec![3, 2, 3], 0.4, seed);
        let zero = fit(&g.data, &FitConfig::default()).unwrap();
        let cc = fit(&g.data, &FitConfig { init: InitStrategy::CompleteCaseOls, ..FitConfig::default() }).unwrap();
        assert!((zero.theta.to_vector() - cc.theta.to_vector()).norm() < 1e-4, "seed {seed}");
    }
}
