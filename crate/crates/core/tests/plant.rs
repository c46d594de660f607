mod common;

use deepo_lqt::lqt::{self, CostParams};
use deepo_lqt::param::{self, GainPolicy};
use deepo_lqt::plant::{self, RolloutConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn recorded_noise_closes_the_dynamics(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, w in 0.01f64..2.0) {
        let sys = plant::generate_system(n, m, seed, 0.9)
            .unwrap()
            .with_noise(DMatrix::identity(n, n) * w)
            .unwrap();
        let ds = plant::collect_data(&sys, 3 * (n + m), seed, true).unwrap();
        let w0 = ds.w0_seq.clone().unwrap();
        let pred = &sys.a * &ds.x0_seq + &sys.b * &ds.u0_seq + w0;
        prop_assert!((pred - &ds.x1_seq).norm() <= 1e-12 * ds.x1_seq.norm().max(1.0));
        // Consecutive columns chain into one trajectory.
        for t in 1..ds.t_len() {
            prop_assert_eq!(ds.x0_seq.column(t), ds.x1_seq.column(t - 1));
        }
    }

    #[test]
    fn identical_seeds_are_bit_identical(seed in any::<u64>(), n in 1usize..5, m in 1usize..3) {
        let sys = plant::generate_system(n, m, seed, 0.8)
            .unwrap()
            .with_noise(DMatrix::identity(n, n) * 0.1)
            .unwrap();
        prop_assert_eq!(&sys, &plant::generate_system(n, m, seed, 0.8).unwrap().with_noise(DMatrix::identity(n, n) * 0.1).unwrap());
        let a = plant::collect_data(&sys, 2 * (n + m), seed, true).unwrap();
        let b = plant::collect_data(&sys, 2 * (n + m), seed, true).unwrap();
        prop_assert_eq!(&a, &b);

        let cp = CostParams::identity(n, m, DVector::from_element(n, 1.0));
        let cfg = RolloutConfig { horizon: 200, seed, noise_on: true, burn_in: 0 };
        let x0 = DVector::zeros(n);
        let r1 = plant::rollout_policy(&sys, &GainPolicy::zero(n, m), &x0, &cp, &cfg).unwrap();
        let r2 = plant::rollout_policy(&sys, &GainPolicy::zero(n, m), &x0, &cp, &cfg).unwrap();
        prop_assert_eq!(r1.states, r2.states);
        prop_assert_eq!(r1.average_cost.to_bits(), r2.average_cost.to_bits());
    }

    #[test]
    fn random_data_is_persistently_exciting(seed in any::<u64>()) {
        let sys = plant::paper_system();
        let ds = plant::collect_data(&sys, 10, seed, false).unwrap();
        let pe = plant::check_pe(&ds);
        prop_assert!(pe.is_pe);
        let svd = ds.d0().singular_values();
        prop_assert!((pe.min_singular_value - svd.min()).abs() <= 1e-10 * svd.max());
    }
}

#[test]
fn rollout_error_shrinks_with_horizon() {
    let sys = plant::paper_system();
    let ds = plant::collect_data(&sys, 10, 0, false).unwrap();
    let dm = param::build_data_matrices(&ds).unwrap();
    let cp = CostParams::identity(4, 2, DVector::from_element(4, 1.0));
    let mut rng = common::rng(11);
    let centre = common::optimal_policy(&sys.a, &sys.b, &cp);
    let theta = common::random_stabilizing(&mut rng, &sys.a, &sys.b, &centre, 0.3, 0.9);
    let closed = common::model_cost(&sys.a, &sys.b, &theta.k_gain, &theta.l_ff, &cp);
    let via_data = lqt::evaluate_xi(&param::lift_policy(&theta, &dm).unwrap(), &dm, &cp).unwrap().cost;
    assert!((closed - via_data).abs() <= 1e-10 * closed);

    let x0 = common::randn_vec(&mut rng, 4);
    let errors: Vec<f64> = [1_000, 10_000, 100_000]
        .iter()
        .map(|&h| {
            let r = plant::rollout_policy(&sys, &theta, &x0, &cp, &RolloutConfig::noiseless(h)).unwrap();
            (r.average_cost - closed).abs()
        })
        .collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    // The transient contributes a bounded total, so the error decays like 1/H.
    assert!(errors[1] / errors[2] > 5.0, "{errors:?}");
    assert!(errors[2] <= 1e-3 * closed, "{errors:?} vs {closed}");
}

#[test]
fn reference_plant_is_open_loop_stable_and_controllable() {
    let sys = plant::paper_system();
    let rho = common::spectral_radius(&sys.a);
    assert!((rho - 0.8).abs() < 1e-3, "rho = {rho}");
    assert!(sys.is_controllable());
    assert_eq!((sys.n(), sys.m()), (4, 2));
}

#[test]
fn short_records_are_rejected() {
    let sys = plant::paper_system();
    assert!(plant::collect_data(&sys, 5, 0, false).is_err());
    assert!(plant::collect_data(&sys, 6, 0, false).is_ok());
}

#[test]
fn diverging_rollout_reports_instability() {
    let sys = plant::paper_system();
    let cp = CostParams::identity(4, 2, DVector::zeros(4));
    let k = DMatrix::from_element(2, 4, 5.0);
    let policy = GainPolicy::new(k, DVector::zeros(2)).unwrap();
    let res = plant::rollout_policy(&sys, &policy, &DVector::from_element(4, 1.0), &cp, &RolloutConfig::noiseless(100_000));
    assert!(res.is_err());
}
