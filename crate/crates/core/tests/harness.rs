use vfem_core::baselines::{run_baseline, BaselineKind};
use vfem_core::datagen::{generate, GenConfig, Mechanism};
use nalgebra::DVector;
use vfem_core::engine::{fit, FitConfig};
use vfem_core::inference::InferenceConfig;
use vfem_core::model::ols;
use vfem_core::montecarlo::{monte_carlo, Method, MonteCarloSpec};
use vfem_core::protocol::FederationConfig;
use vfem_core::VfemError;

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn mask_correlation(mechanism: Mechanism) -> f64 {
    let mut cfg = GenConfig::standard().with_n(100_000).with_seed(1);
    cfg.mechanism = mechanism;
    let g = generate(&cfg).unwrap();
    let mask = g.data.mask();
    let m: Vec<f64> = (0..g.data.n()).map(|i| f64::from(u8::from(mask.is_missing(i, 1)))).collect();
    correlation(&m, g.data.y().as_slice())
}

#[test]
fn mechanisms_are_distinguishable() {
    let mcar = mask_correlation(Mechanism::Mcar);
    let mar = mask_correlation(Mechanism::MarOnY);
    assert!(mcar.abs() < 0.01, "MCAR {mcar}");
    assert!(mar.abs() > 0.1, "MAR {mar}");
}

#[test]
fn empirical_rates_match_the_targets() {
    let g = generate(&GenConfig::smes_like().with_seed(1)).unwrap();
    let mask = g.data.mask();
    let target = [0.5365, 0.8761, 0.9305, 0.0091, 0.9328];
    for (k, t) in target.iter().enumerate() {
        let rate = mask.missing_count(k) as f64 / g.data.n() as f64;
        assert!((rate - t).abs() < 0.01, "client {k}: {rate} vs {t}");
    }
}

#[test]
fn smes_like_starves_complete_case() {
    let g = generate(&GenConfig::smes_like().with_seed(1)).unwrap();
    let complete = g.data.complete_rows().len();
    assert!(complete < 200, "{complete}");
    match run_baseline(BaselineKind::CompleteCase, &g.data, &FederationConfig::default()) {
        Err(VfemError::InsufficientCompleteCases { found, .. }) => assert_eq!(found, complete),
        Ok(fit) => assert!(fit.rows_used < 200),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn pooled_ols_error_is_of_order_root_p_over_n() {
    let g = generate(&GenConfig::standard().with_n(4000).with_rate(0.0).with_seed(2)).unwrap();
    let b = ols(&g.data.pooled_with_nan(), g.data.y()).unwrap();
    let err = (b - &g.truth.beta).norm();
    assert!(err < 4.0 * (6.0f64 / 4000.0).sqrt(), "{err}");
}

#[test]
fn single_replicate_without_missingness_matches_ols() {
    let gen = GenConfig::standard().with_rate(0.0).with_n(600);
    let mut spec = MonteCarloSpec::new(1, gen, vec![Method::Vfem, Method::Ols]);
    spec.fit = FitConfig { tolerance: 1e-13, beta_tolerance: 1e-15, ..FitConfig::default() };
    spec.inference = Some(InferenceConfig::default());
    let s = monte_carlo(&spec).unwrap();
    let (v, o) = (s.method(Method::Vfem).unwrap(), s.method(Method::Ols).unwrap());
    let close = |a: &[Option<f64>], b: &[Option<f64>]| {
        a.iter().zip(b).all(|(x, y)| (x.unwrap() - y.unwrap()).abs() < 1e-6)
    };
    assert!(close(&v.bias, &o.bias) && close(&v.rmse, &o.rmse) && close(&v.sd, &o.sd));
    assert!(close(&v.coverage, &o.coverage));
    assert!((v.prediction_mse.unwrap() - o.prediction_mse.unwrap()).abs() < 1e-6);
}

#[test]
fn worker_count_does_not_change_the_summary() {
    let mut spec = MonteCarloSpec::new(6, GenConfig::standard().with_n(300), vec![Method::Vfem, Method::MeanImpute]);
    spec.workers = 1;
    let a = monte_carlo(&spec).unwrap();
    spec.workers = 3;
    let b = monte_carlo(&spec).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn starved_baselines_are_not_failures() {
    let mut gen = GenConfig::standard().with_n(60).with_rate(0.85);
    gen.min_complete = 0;
    let spec = MonteCarloSpec::new(5, gen, vec![Method::CompleteCase]);
    let s = monte_carlo(&spec).unwrap();
    let cc = s.method(Method::CompleteCase).unwrap();
    assert_eq!(cc.not_applicable + cc.succeeded, 5);
    assert!(cc.not_applicable > 0);
    assert_eq!(s.failed_replicates, 0);
}

#[test]
fn widespread_failure_aborts_the_harness() {
    let mut spec = MonteCarloSpec::new(5, GenConfig::standard().with_n(300), vec![Method::Vfem]);
    spec.fit = FitConfig { max_iters: 2, ..FitConfig::default() };
    spec.inference = Some(InferenceConfig::default());
    match monte_carlo(&spec) {
        Err(VfemError::HarnessFailure { failed, total }) => assert_eq!((failed, total), (5, 5)),
        other => panic!("{other:?}"),
    }
}

/// Fits on whole datasets: the harness's test split removes complete rows,
/// and under MAR-on-y that removal is itself a selection on y.
#[test]
fn mar_on_y_keeps_vfem_nearly_unbiased() {
    let bias = |mechanism| {
        let reps = 100;
        let mut acc = DVector::zeros(6);
        for r in 0..reps {
            let mut gen = GenConfig::standard().with_seed(1000 + r);
            gen.mechanism = mechanism;
            let g = generate(&gen).unwrap();
            let f = fit(&g.data, &FitConfig::default()).unwrap();
            acc += (&f.theta.beta - &g.truth.beta) / reps as f64;
        }
        acc.abs().mean()
    };
    let (mcar, mar) = (bias(Mechanism::Mcar), bias(Mechanism::MarOnY));
    eprintln!("mean |bias|: MCAR {mcar:.5}, MAR-on-y {mar:.5}");
    assert!(mar < 3.0 * mcar.max(0.005), "MAR {mar} vs MCAR {mcar}");
}
