mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use vfem_core::linalg::{repair_psd, symmetric_eigenvalues, unvech, vech};
use vfem_core::model::{closed_form_m_step, e_step, observed_loglik, q_gradient_beta_at, ModelParameters};
use vfem_core::montecarlo::split_rows;
use vfem_core::protocol::{Envelope, ProtocolMessage, SampleScalars};

fn symmetric(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0..5.0f64, dim * dim).prop_map(move |v| {
        let m = DMatrix::from_vec(dim, dim, v);
        (&m + m.transpose()) * 0.5
    })
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vech_roundtrips(m in (1usize..7).prop_flat_map(symmetric)) {
        prop_assert_eq!(unvech(&vech(&m), m.nrows()), m);
    }

    #[test]
    fn repaired_matrices_respect_the_floor(m in (1usize..7).prop_flat_map(symmetric), floor in 0.0..1.0f64) {
        let (r, _) = repair_psd(&m, floor);
        prop_assert!(min_eig(&r) >= floor - 1e-9);
        prop_assert!((&r - r.transpose()).amax() < 1e-12);
    }

    #[test]
    fn flat_parameters_roundtrip(s in 0u64..1000) {
        let g = common::random_instance(s);
        let layout = g.data.layout();
        let back = ModelParameters::from_vector(&g.truth.to_vector(), layout).unwrap();
        prop_assert_eq!(back, g.truth.clone());
        prop_assert_eq!(g.truth.to_vector().len(), ModelParameters::dim(layout));
    }

    #[test]
    fn e_step_quantities_are_well_posed(s in 0u64..1000) {
        let g = common::random_instance(s);
        let pc = e_step(&g.truth, &g.data).unwrap();
        for i in 0..pc.n() {
            prop_assert!(pc.d[i] >= g.truth.sigma2);
            let quad = pc.missing_quad(i);
            let v4 = pc.v4(i);
            prop_assert!(v4 >= -1e-12 && v4 <= quad + 1e-12);
        }
        let c = pc.conditional_covariance_sum();
        prop_assert!((&c - c.transpose()).amax() < 1e-9 * c.amax().max(1.0));
        prop_assert!(min_eig(&c) >= -1e-9 * c.amax().max(1.0));
    }

    #[test]
    fn closed_form_step_is_stationary_and_ascends(s in 0u64..1000) {
        let g = common::random_instance(s);
        let start = ModelParameters::new(
            DVector::zeros(g.data.p()),
            g.truth.mu.clone(),
            g.truth.sigma.clone(),
            g.truth.sigma2 * 2.0,
        );
        let next = closed_form_m_step(&start, &g.data).unwrap();
        prop_assert!(next.sigma2 > 0.0);
        for s in &next.sigma {
            prop_assert!(min_eig(s) >= -1e-10);
        }
        let grad = q_gradient_beta_at(&next.beta, &start, &g.data).unwrap();
        prop_assert!(grad.amax() < 1e-8, "‖g‖∞ = {}", grad.amax());
        let (a, b) = (observed_loglik(&start, &g.data).unwrap(), observed_loglik(&next, &g.data).unwrap());
        prop_assert!(b >= a - 1e-9 * a.abs().max(1.0), "{b} < {a}");
    }

    #[test]
    fn envelopes_roundtrip(t in any::<u64>(), round in any::<u32>(), from in 0u32..6,
                           d in prop::collection::vec(-1e300..1e300f64, 0..20),
                           r in prop::collection::vec(-1e-300..1e-300f64, 0..20)) {
        let n = d.len().min(r.len());
        let body = ProtocolMessage::EStepBroadcast {
            d: SampleScalars::from_vec(d[..n].to_vec()),
            r: SampleScalars::from_vec(r[..n].to_vec()),
        };
        let env = Envelope::new(t, round, from, body);
        prop_assert_eq!(Envelope::decode(&env.encode().unwrap()).unwrap(), env);
    }

    #[test]
    fn test_rows_are_complete_and_disjoint(s in 0u64..1000, split in any::<u64>()) {
        let g = common::random_instance(s);
        let (train, test) = split_rows(&g.data, split);
        let mask = g.data.mask();
        prop_assert_eq!(train.len() + test.len(), g.data.n());
        prop_assert!(test.iter().all(|&i| !mask.any_missing(i)));
        prop_assert!(test.iter().all(|i| train.binary_search(i).is_err()));
    }
}
