use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use pegsim_core::amm::Pool;
use pegsim_core::optim::{l1_objective, soft_threshold};
use pegsim_core::vault::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_chain_vault(q0: f64, q1: f64, liabilities: f64) -> VaultState {
    let mut v = VaultState::new(
        vec![
            CollateralPosition { asset: "C".into(), chain: 0, quantity: q0 },
            CollateralPosition { asset: "C".into(), chain: 1, quantity: q1 },
        ],
        BTreeMap::from([("C".to_string(), 2.0)]),
        VaultParams::default(),
    );
    v.liabilities.push(Sfc { quantity: liabilities, mint_block: 0 });
    v
}

fn deep_pools(depth: f64) -> Vec<Pool> {
    (0..2).map(|k| Pool::new(depth, depth / 2.0, 0, k).unwrap()).collect()
}

/// Cyclic coordinate descent with exact one-dimensional minimization.
fn coordinate_descent(g: &DVector<f64>, j: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let n = j.ncols();
    let mut x = DVector::zeros(n);
    for _ in 0..20_000 {
        for k in 0..n {
            let col = j.column(k);
            let norm = col.norm_squared();
            if norm == 0.0 {
                continue;
            }
            let resid = g - j * &x + col * x[k];
            x[k] = soft_threshold(col.dot(&resid), lambda / 2.0) / norm;
        }
    }
    x
}

#[test]
fn mint_sweep_matches_rearranged_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let v = rng.gen_range(1.0..1e6);
        let delta = rng.gen_range(-0.05..0.05);
        let sigma = rng.gen_range(0.0..1.0);
        let (alpha, gamma, peg) = (0.5, 2.0, 1.0);
        let q = mint_quantity(v, peg, alpha, gamma, delta, sigma);
        let damp = 1.0 + gamma * sigma * sigma;
        let oracle = v * (damp + alpha * delta) / (peg * damp);
        assert!((q - oracle).abs() <= 1e-9 * oracle.abs());
        // Never more than the undamped response.
        assert!((q / v - 1.0).abs() <= alpha * delta.abs() + 1e-12);
    }
}

#[test]
fn lasso_matches_coordinate_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(n..=3);
        let j = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0));
        let g = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let lambda = rng.gen_range(0.0..2.0);
        let sol = rebalance(&g, &j, lambda).unwrap();
        let reference = coordinate_descent(&g, &j, lambda);
        let f_ref = l1_objective(&g, &j, lambda, &reference);
        assert!(
            sol.objective <= f_ref + 1e-6 * (1.0 + f_ref),
            "solver {} vs reference {}",
            sol.objective,
            f_ref
        );
    }
}

#[test]
fn lasso_beats_a_grid_in_two_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let j = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-2.0..2.0));
        let g = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
        let sol = rebalance(&g, &j, 0.7).unwrap();
        let mut best = f64::INFINITY;
        for a in -200..=200 {
            for b in -200..=200 {
                let x = DVector::from_vec(vec![a as f64 * 0.05, b as f64 * 0.05]);
                best = best.min(l1_objective(&g, &j, 0.7, &x));
            }
        }
        assert!(sol.objective <= best + 1e-9);
    }
}

#[test]
fn one_dimensional_closed_form() {
    for (g, jv, lambda) in [(3.0, 2.0, 0.7), (-1.0, 0.5, 0.7), (0.1, 1.0, 0.7), (5.0, -1.5, 2.0)] {
        let sol = rebalance(&DVector::from_element(1, g), &DMatrix::from_element(1, 1, jv), lambda).unwrap();
        let expected = soft_threshold(jv * g, lambda / 2.0) / (jv * jv);
        assert!((sol.x[0] - expected).abs() < 1e-9, "{} vs {}", sol.x[0], expected);
    }
}

#[test]
fn liquidation_restores_the_floor_band() {
    // 1.19 with pools two thousand times deeper than the vault.
    let mut v = two_chain_vault(300.0, 295.0, 1000.0);
    assert!((v.collateral_ratio() - 1.19).abs() < 1e-12);
    let mut pools = deep_pools(2e6);
    let out = v.liquidate_partial(&mut pools).unwrap();
    assert!(out.ratio_after >= 1.25 - 1e-9 && out.ratio_after <= 1.30, "{}", out.ratio_after);
    assert!(!out.insolvent);
    assert!(out.closed > 0.0);
    assert!((v.total_liabilities() - (1000.0 - out.closed)).abs() < 1e-9);
}

#[test]
fn thin_pools_make_the_vault_insolvent() {
    let mut v = two_chain_vault(300.0, 295.0, 1000.0);
    let mut pools = deep_pools(50.0);
    let out = v.liquidate_partial(&mut pools).unwrap();
    assert!(out.insolvent && v.insolvent);
    assert!(out.ratio_after < 1.25);
    assert_eq!(v.mint_sfc(Deposit { position: 0, quantity: 1.0 }, 0.0, 0.0, 1), Err(VaultError::MintingHalted));
}

#[test]
fn rebalance_moves_toward_the_warning_threshold() {
    let mut v = two_chain_vault(320.0, 300.0, 1000.0);
    assert_eq!(v.health(), VaultHealth::Warning);
    let mut pools = deep_pools(2e6);
    let out = v.rebalance_with_pools(&mut pools);
    assert!(out.ratio_after > out.ratio_before);
    assert!(out.ratio_after <= 1.3 + 1e-9);
    assert!((out.ratio_after - 1.3).abs() < 1e-3, "{}", out.ratio_after);
    assert!(out.sold.iter().all(|&x| x >= 0.0));
}

#[test]
fn solvency_harness_without_oracle_errors() {
    let report = solvency_harness(300, 0.0, 3, &SolvencyGameConfig::default());
    assert_eq!(report.violations, 0);
    assert_eq!(report.flagged_breaches, 0);
}

#[test]
fn oracle_errors_only_cause_flagged_breaches() {
    let cfg = SolvencyGameConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut flagged = 0;
    for _ in 0..300 {
        let o = solvency_game(SolvencyAdversary::sample(&mut rng), 0.05, rng.gen(), &cfg);
        assert!(!o.violation);
        for &(block, _, is_flagged) in &o.breaches {
            assert!(is_flagged);
            assert!(o.error_blocks.iter().any(|&e| e <= block && block - e <= cfg.lookback));
            flagged += 1;
        }
    }
    assert!(flagged > 0, "errors at 5% should produce some breaches");
}

#[test]
fn breaches_without_maintenance_are_not_violations() {
    let cfg = SolvencyGameConfig { rebalancing: false, ..Default::default() };
    let o = solvency_game(SolvencyAdversary::LiquidationTrigger { max_step: 0.04 }, 0.0, 1, &cfg);
    assert!(!o.breaches.is_empty());
    assert!(!o.violation);
}

proptest! {
    #[test]
    fn accepted_mints_keep_the_minimum_ratio(
        steps in prop::collection::vec((0usize..2, 1.0f64..400.0, -0.05f64..0.05, 0.0f64..0.5), 1..30)
    ) {
        let mut v = two_chain_vault(650.0, 650.0, 1000.0);
        for (block, (pos, qty, delta, sigma)) in steps.into_iter().enumerate() {
            let _ = v.mint_sfc(Deposit { position: pos, quantity: qty }, delta, sigma, block as u64);
            prop_assert!(v.collateral_ratio() >= 1.2 - 1e-12);
        }
    }

    #[test]
    fn classification_partitions_the_line(c in -10.0f64..10.0) {
        let h = classify_state(c);
        let expected = if c >= 1.3 { VaultHealth::Healthy } else if c >= 1.2 { VaultHealth::Warning } else { VaultHealth::Liquidation };
        prop_assert_eq!(h, expected);
    }

    #[test]
    fn payoff_is_capped(price in 0.5f64..1.5, sigma in 0.0f64..0.3, alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let phi = sfc_payoff(price, 1.0, sigma, alpha, beta);
        prop_assert!(phi.abs() <= beta * sigma + 1e-15);
        prop_assert!(phi.abs() <= alpha * (price - 1.0).abs() + 1e-15);
        prop_assert!(phi * (1.0 - price) >= 0.0);
    }

    #[test]
    fn liquidation_lands_in_band(q0 in 200.0f64..400.0, ratio in 1.05f64..1.1999) {
        let q1 = ratio * 1000.0 / 2.0 - q0;
        prop_assume!(q1 > 10.0);
        let mut v = two_chain_vault(q0, q1, 1000.0);
        let mut pools = deep_pools(5e6);
        let out = v.liquidate_partial(&mut pools).unwrap();
        prop_assert!(out.ratio_after >= 1.25 - 1e-9 && out.ratio_after <= 1.30);
    }
}
