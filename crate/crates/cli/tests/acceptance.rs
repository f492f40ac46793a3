//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or runs past its time limit.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use pegsim_core::adaptor_sig::{adapt, extract_secret, pre_sign, pre_verify, verify, KeyPair};
use pegsim_core::amm::{Direction, Pool};
use pegsim_core::group::{Group, Ristretto, TinyToy, Toy};
use pegsim_core::market_ops::{hedge_objective, hedge_weights};
use pegsim_core::metrics::raw_hhi;
use pegsim_core::optim::l1_objective;
use pegsim_core::scenario::{ScenarioConfig, Simulation};
use pegsim_core::swap_engine::atomicity_harness;
use pegsim_core::vault::{
    mint_boost, rebalance, solvency_harness, CollateralPosition, Deposit, SolvencyGameConfig, VaultParams, VaultState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, pass: String, fail: String) -> Outcome {
    if ok {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn hhi_worked_values() -> Outcome {
    let got = [raw_hhi(&[0.7]), raw_hhi(&[0.4, 0.3, 0.3]), raw_hhi(&[0.2; 6])];
    check(got == [4_900.0, 3_400.0, 2_400.0], format!("{got:?}"), format!("got {got:?}"))
}

fn round_trip<G: Group>(sk: G::Scalar, t: G::Scalar, msg: &[u8]) -> bool {
    let kp = KeyPair::<G>::from_secret(sk);
    let adaptor = G::mul_base(&t);
    let Ok(pre) = pre_sign(&kp, msg, &adaptor, b"acceptance") else { return false };
    if !pre_verify(&kp.pk(), msg, &adaptor, &pre) {
        return false;
    }
    let Ok(sig) = adapt(&pre, &t) else { return false };
    verify(&kp.pk(), msg, &sig) && extract_secret(&sig, &pre).is_ok_and(|x| x == t)
}

fn adaptor_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = 0;
    for _ in 0..1_000 {
        let mut wide = [0u8; 64];
        rng.fill(&mut wide);
        let sk = Ristretto::scalar_reduce_wide(&wide);
        rng.fill(&mut wide);
        let t = Ristretto::scalar_reduce_wide(&wide);
        let msg: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        if sk == Ristretto::scalar_zero() || t == Ristretto::scalar_zero() || !round_trip::<Ristretto>(sk, t, &msg) {
            failures += 1;
        }
    }
    let mut toy_cases = 0;
    for sk in 1..83 {
        for t in 1..83 {
            toy_cases += 1;
            failures += !round_trip::<TinyToy>(TinyToy::scalar_from_u64(sk), TinyToy::scalar_from_u64(t), b"m") as u32;
        }
    }
    for sk in [1, 2, 509, 1018] {
        for t in 1..1019 {
            toy_cases += 1;
            failures += !round_trip::<Toy>(Toy::scalar_from_u64(sk), Toy::scalar_from_u64(t), b"m") as u32;
        }
    }
    check(
        failures == 0,
        format!("1000 production cases, {toy_cases} toy cases"),
        format!("{failures} failing cases"),
    )
}

fn atomicity_game() -> Outcome {
    let r = atomicity_harness::<Ristretto>(10_000, 77);
    let refunded = r.adversarial_refunded as f64 / r.adversarial_runs.max(1) as f64;
    check(
        r.violations == 0 && refunded >= 0.30,
        format!("0 violations, {:.1}% of adversarial runs refunded", 100.0 * refunded),
        format!("{} violations, refunded fraction {refunded:.3}", r.violations),
    )
}

fn amm_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut pool = Pool::new(1e6, 5e5, 0, 0).unwrap();
    let k0 = pool.invariant();
    let (mut drift, mut impact_err) = (0.0f64, 0.0f64);
    for _ in 0..1_000 {
        let dir = if rng.gen_bool(0.5) { Direction::BuyStable } else { Direction::SellStable };
        let depth_out = match dir {
            Direction::BuyStable => pool.reserve_a,
            Direction::SellStable => pool.reserve_b,
        };
        let reserve_in = depth_out / match dir {
            Direction::BuyStable => pool.reserve_a / pool.reserve_b,
            Direction::SellStable => pool.reserve_b / pool.reserve_a,
        };
        let amount = rng.gen_range(1e-3..0.02) * reserve_in;
        let (_, rec) = pool.execute(dir, &amount).unwrap();
        impact_err = impact_err.max((rec.price_impact() - amount / depth_out).abs());
        drift = drift.max((pool.invariant() / k0 - 1.0).abs());
    }
    check(
        drift <= 1e-12 && impact_err <= 1e-12,
        format!("max drift {drift:.1e}, max impact error {impact_err:.1e}"),
        format!("drift {drift:.3e}, impact error {impact_err:.3e}"),
    )
}

fn solvency_game() -> Outcome {
    let cfg = SolvencyGameConfig::default();
    let honest = solvency_harness(10_000, 0.0, 5, &cfg);
    let noisy = solvency_harness(10_000, 0.05, 6, &cfg);
    check(
        honest.violations == 0 && honest.flagged_breaches == 0 && noisy.violations == 0 && noisy.error_blocks > 0,
        format!(
            "honest: 0 breaches; 5% oracle errors: {} error blocks, {} breaches all flagged",
            noisy.error_blocks, noisy.flagged_breaches
        ),
        format!("honest {honest:?}, noisy {noisy:?}"),
    )
}

fn minting_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for block in 0..1_000u64 {
        let params = VaultParams {
            alpha: rng.gen_range(0.0..2.0),
            gamma: rng.gen_range(0.0..5.0),
            peg: rng.gen_range(0.5..2.0),
            ..VaultParams::default()
        };
        let price = rng.gen_range(0.1..10.0);
        let qty = rng.gen_range(1.0..1e4);
        let dev = rng.gen_range(-0.1..0.1);
        let sigma = rng.gen_range(0.0..1.0);
        let pos = CollateralPosition { asset: "C".into(), chain: 0, quantity: 1e12 };
        let mut vault = VaultState::new(vec![pos], [("C".to_string(), price)].into_iter().collect(), params);
        let q = vault.mint_sfc(Deposit { position: 0, quantity: qty }, dev, sigma, block).map_err(|e| e.to_string())?;
        let direct = (qty * price / params.peg) * (1.0 + params.alpha * dev / (1.0 + params.gamma * sigma * sigma));
        worst = worst.max((q - direct).abs() / direct.abs());
    }
    let mut monotone = true;
    for dev in [1e-4, 0.01, 0.3] {
        let mut prev = f64::INFINITY;
        for i in 0..=2_000 {
            let b = mint_boost(0.5, 2.0, dev, i as f64 * 0.005).abs();
            monotone &= b < prev;
            prev = b;
        }
    }
    check(
        worst <= 1e-12 && monotone,
        format!("max relative error {worst:.1e}, boost strictly decreasing in sigma"),
        format!("max relative error {worst:.3e}, monotone {monotone}"),
    )
}

/// Grid search that repeatedly re-centres a 25-point-per-axis grid on the
/// best point and shrinks it fourfold.
fn zoom_grid(dim: usize, centre: &[f64], half: f64, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let pts = 25;
    let mut c = centre.to_vec();
    let mut half = half;
    let mut best = f(&c);
    for _ in 0..30 {
        let h = 2.0 * half / (pts - 1) as f64;
        let mut idx = vec![0usize; dim];
        let mut best_pt = c.clone();
        loop {
            let x: Vec<f64> = (0..dim).map(|d| c[d] - half + idx[d] as f64 * h).collect();
            let v = f(&x);
            if v < best {
                best = v;
                best_pt = x;
            }
            let mut d = 0;
            while d < dim {
                idx[d] += 1;
                if idx[d] < pts {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == dim {
                break;
            }
        }
        c = best_pt;
        half = 3.0 * h;
    }
    best
}

fn optimizers() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_l1 = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(n..=3);
        let j = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-2.0..2.0));
        let g = DVector::from_fn(m, |_, _| rng.gen_range(-3.0..3.0));
        let lambda = rng.gen_range(0.1..2.0);
        let sol = rebalance(&g, &j, lambda).map_err(|e| e.to_string())?;
        let f = |x: &[f64]| l1_objective(&g, &j, lambda, &DVector::from_column_slice(x));
        let half = g.norm_squared() / lambda + 1.0;
        let grid = zoom_grid(n, &vec![0.0; n], half, &f);
        worst_l1 = worst_l1.max((sol.objective - grid).abs());
    }
    let mut worst_hedge = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=3);
        let deltas: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lambda = 0.7;
        let w = hedge_weights(&deltas, lambda);
        // Simplex points as the first n − 1 coordinates; outside points are
        // pushed up by a large penalty.
        let f = |x: &[f64]| {
            let rest = 1.0 - x.iter().sum::<f64>();
            if x.iter().any(|&v| v < 0.0) || rest < 0.0 {
                return f64::INFINITY;
            }
            let mut full = x.to_vec();
            full.push(rest);
            hedge_objective(&deltas, lambda, &DVector::from_vec(full))
        };
        let grid = if n == 1 { f(&[]) } else { zoom_grid(n - 1, &vec![0.5; n - 1], 0.5, &f) };
        worst_hedge = worst_hedge.max((hedge_objective(&deltas, lambda, &w) - grid).abs());
    }
    check(
        worst_l1 <= 1e-6 && worst_hedge <= 1e-6,
        format!("max gap: rebalancing {worst_l1:.1e}, hedging {worst_hedge:.1e}"),
        format!("max gap: rebalancing {worst_l1:.3e}, hedging {worst_hedge:.3e}"),
    )
}

fn stabilization_recovery() -> Outcome {
    let cfg = ScenarioConfig::baseline();
    let base = Simulation::new(cfg.clone()).map_err(|e| e.to_string())?.run();
    let mut off = cfg;
    off.agents.enabled = false;
    let abl = Simulation::new(off).map_err(|e| e.to_string())?.run();
    let (b, a) = (&base.summary.recovery[0], &abl.summary.recovery[0]);
    check(
        b.recovered && b.envelope_monotone && !a.recovered,
        format!("re-entry after {:?} blocks; ablation after {:?} blocks", b.reentry_after, a.reentry_after),
        format!("baseline {b:?}, ablation {a:?}"),
    )
}

fn impact_audit() -> Outcome {
    let r = Simulation::new(ScenarioConfig::baseline()).map_err(|e| e.to_string())?.run();
    let a = &r.summary.impact_audit;
    check(
        a.trades > 0 && a.fraction <= 0.01,
        format!("{} of {} trades over the bound", a.violations.len(), a.trades),
        format!("fraction {} over {} trades", a.fraction, a.trades),
    )
}

fn determinism() -> Outcome {
    let dir = std::env::temp_dir().join(format!("pegsim-acceptance-{}", std::process::id()));
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_pegsim"))
            .args(["run", "--seed", "42", "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run exited with {:?}", status.status.code()));
        }
        traces.push(fs::read(out.join("trace.csv")).map_err(|e| e.to_string())?);
    }
    let _ = fs::remove_dir_all(&dir);
    check(
        traces[0] == traces[1],
        format!("{} identical bytes", traces[0].len()),
        "trace files differ".into(),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, f64, fn() -> Outcome); 10] = [
        ("HHI worked values", 1.0, hhi_worked_values),
        ("Adaptor-signature round trip", 30.0, adaptor_round_trip),
        ("Atomicity game", 60.0, atomicity_game),
        ("AMM identities", 5.0, amm_identities),
        ("Vault solvency game", 60.0, solvency_game),
        ("Minting formula", 5.0, minting_formula),
        ("Rebalancing and hedging optimizers", 30.0, optimizers),
        ("Stabilization recovery", 30.0, stabilization_recovery),
        ("Impact-bound audit", 10.0, impact_audit),
        ("Determinism", 20.0, determinism),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) if secs < limit => format!("PASS  {name}: {detail} ({secs:.2}s, limit {limit}s)"),
            Ok(detail) => format!("FAIL  {name}: {detail} but took {secs:.2}s, limit {limit}s"),
            Err(detail) => format!("FAIL  {name}: {detail} ({secs:.2}s)"),
        };
        if line.starts_with("FAIL") {
            failed += 1;
        }
        println!("{line}");
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
