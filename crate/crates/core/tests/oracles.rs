mod common;

use c3_core::benchmarks::cartpole::{build_cartpole_lcs, cartpole_controller_params, CartpoleParams};
use c3_core::c3::{c3_solve, Projection};
use c3_core::lcp::{lcp_residual, lcp_solve_enumerate, lcp_solve_lemke, DEFAULT_TOL};
use c3_core::miqp::{mpc_miqp_full, solve_bcqp_bnb, BnbSettings};
use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn lemke_agrees_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let m = rng.gen_range(1..=8);
        let inst = random_p_matrix_lcp(&mut rng, m);
        let lemke = lcp_solve_lemke(&inst, DEFAULT_TOL, 1000);
        let brute = lcp_solve_enumerate(&inst, DEFAULT_TOL).unwrap();
        assert!(lemke.is_solved() && brute.is_solved());
        assert!((&lemke.lambda - &brute.lambda).amax() < 1e-6);
    }
}

#[test]
fn branch_and_bound_agrees_with_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let k = rng.gen_range(1..=4);
        let n = k + rng.gen_range(0..3);
        let problem = random_bcqp(&mut rng, n, k);
        let bnb = solve_bcqp_bnb(&problem, &BnbSettings::default()).unwrap();
        let brute = enumerate_bcqp(&problem);
        assert!((bnb.objective - brute).abs() < 1e-6 * (1.0 + brute.abs()), "{} vs {brute}", bnb.objective);
    }
}

#[test]
fn hybrid_mpc_agrees_with_mode_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let lcs = tiny_lcs(&mut rng);
        let cost = tiny_cost(&mut rng, 3);
        let x0 = DVector::from_vec(vec![rng.gen_range(-0.3..0.5), rng.gen_range(-2.0..1.0)]);
        let miqp = mpc_miqp_full(&lcs, &cost, &x0, None, 1000.0, &BnbSettings::default()).unwrap();
        let brute = enumerate_mode_sequences(&lcs, &cost, &x0);
        assert!((miqp.objective - brute).abs() < 1e-6 * (1.0 + brute.abs()), "{} vs {brute}", miqp.objective);
        assert!((cost.evaluate(&miqp.trajectory) - miqp.objective).abs() < 1e-6 * (1.0 + brute.abs()));
    }
}

#[test]
fn parallel_projection_matches_sequential() {
    let lcs = build_cartpole_lcs(&CartpoleParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for projection in [Projection::Lcp, Projection::Miqp, Projection::Admm] {
        let mut params = cartpole_controller_params(&lcs, projection).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.1, 1.0, 0.5]);
        params.w0 = Some((0..10).map(|_| random_vector(&mut rng, 7, 0.1)).collect());
        let seq = c3_solve(&lcs, &params, &x0).unwrap();
        params.parallel = true;
        let par = c3_solve(&lcs, &params, &x0).unwrap();
        assert_eq!(seq.delta, par.delta);
        assert_eq!(seq.u0, par.u0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lemke_solution_is_complementary(seed in any::<u64>(), m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_p_matrix_lcp(&mut rng, m);
        let sol = lcp_solve_lemke(&inst, DEFAULT_TOL, 1000);
        prop_assert!(sol.is_solved());
        let (comp, feas) = lcp_residual(&inst, &sol.lambda).unwrap();
        prop_assert!(comp < 1e-8 && feas < 1e-8);
    }

    #[test]
    fn scaled_dual_tracks_penalty(seed in any::<u64>(), rho in 0.01f64..10.0, rho_s in 1.0f64..3.0) {
        // One iteration from random copies and multipliers: ρ' w' = ρ (w + z - δ).
        let lcs = build_cartpole_lcs(&CartpoleParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = cartpole_controller_params(&lcs, Projection::Lcp).unwrap();
        params.s = 1;
        params.rho = rho;
        params.rho_s = rho_s;
        let w0: Vec<DVector<f64>> = (0..10).map(|_| random_vector(&mut rng, 7, 1.0)).collect();
        params.delta0 = Some((0..10).map(|_| random_vector(&mut rng, 7, 1.0)).collect());
        params.w0 = Some(w0.clone());
        let x0 = random_vector(&mut rng, 4, 0.3);
        let res = c3_solve(&lcs, &params, &x0).unwrap();
        prop_assert!((res.rho_final - rho * rho_s).abs() <= 1e-15 * res.rho_final);
        for k in 0..10 {
            let before = (&w0[k] + &res.z[k] - &res.delta[k]) * rho;
            let after = &res.w[k] * res.rho_final;
            prop_assert!((after - &before).amax() <= 1e-13 * (1.0 + before.amax()));
        }
        // warm start keeps the unscaled multipliers
        let (_, w_next) = res.shifted_warm_start(rho);
        for k in 0..9 {
            let kept = &w_next[k] * rho - &res.w[k + 1] * res.rho_final;
            prop_assert!(kept.amax() <= 1e-13 * (1.0 + res.w[k + 1].amax() * res.rho_final));
        }
    }

    #[test]
    fn branch_and_bound_never_beats_feasible_modes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_bcqp(&mut rng, 5, 3);
        let bnb = solve_bcqp_bnb(&problem, &BnbSettings::default()).unwrap();
        let y = problem.y(&bnb.z);
        for &(i, j) in &problem.pairs {
            prop_assert!(bnb.z[i] >= -1e-7 && y[j] >= -1e-7);
            prop_assert!(bnb.z[i].min(y[j]) <= 1e-7);
        }
        prop_assert!(bnb.objective <= enumerate_bcqp(&problem) + 1e-6);
    }

    #[test]
    fn projections_are_complementary(seed in any::<u64>()) {
        let lcs = build_cartpole_lcs(&CartpoleParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = random_vector(&mut rng, 7, 1.0);
        let lcp = c3_core::c3::project_lcp(&target, &lcs).unwrap();
        prop_assert!(c3_core::c3::complementarity_violation(&lcs, &lcp) < 1e-8);
        let u = nalgebra::DMatrix::identity(7, 7);
        let miqp = c3_core::c3::project_miqp(&target, &lcs, &u, 1000.0, &BnbSettings::default()).unwrap();
        prop_assert!(c3_core::c3::complementarity_violation(&lcs, &miqp) < 1e-7);
        // the MIQP projection is the closest complementary point, so it is no
        // farther than the LCP one
        prop_assert!((&miqp - &target).norm() <= (&lcp - &target).norm() + 1e-9);
    }
}
