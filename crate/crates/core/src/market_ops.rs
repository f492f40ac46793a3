//! Stabilization agents: reward and policy scoring, hedge weights, the PID
//! liquidity update, the arbitrage rule, and the manipulation game.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::amm::{Direction, Pool};
use crate::optim::simplex_qp;
use crate::scenario::{AdversaryConfig, AdversaryKind, ScenarioConfig, ScenarioError, Simulation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    pub gamma_discount: f64,
    pub lambda_risk: f64,
    pub alpha_arb: f64,
    pub alpha_stab: f64,
    pub kappa: f64,
    pub mu: f64,
    pub nu: f64,
    pub lambda_hedge: f64,
    pub deviation_clamp: f64,
    pub ewma_decay: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            gamma_discount: 0.95,
            lambda_risk: 2.5,
            alpha_arb: 1.0,
            alpha_stab: 0.01,
            kappa: 0.3,
            mu: 1.1,
            nu: 0.05,
            lambda_hedge: 0.7,
            deviation_clamp: 1e-6,
            ewma_decay: 0.94,
        }
    }
}

/// `R_t = α_arb·Π_t + α_stab·ln(1/|Δ_t|)` with `|Δ_t|` floored at the clamp.
pub fn step_reward(profit: f64, deviation: f64, params: &AgentParams) -> f64 {
    let d = deviation.abs().max(params.deviation_clamp);
    params.alpha_arb * profit + params.alpha_stab * (1.0 / d).ln()
}

/// `Σ γ^t R_t` over one trace.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub score: f64,
    pub mean: f64,
    pub variance: f64,
    pub warning: Option<String>,
}

/// Mean minus `λ_risk` times the sample variance of discounted reward sums
/// across replications. One replication has variance 0 and a warning.
pub fn policy_score(replications: &[Vec<f64>], params: &AgentParams) -> PolicyScore {
    assert!(!replications.is_empty(), "need at least one replication");
    let sums: Vec<f64> = replications.iter().map(|r| discounted_sum(r, params.gamma_discount)).collect();
    let n = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let (variance, warning) = if sums.len() == 1 {
        let msg = "single replication: variance taken as 0".to_string();
        warn!("{msg}");
        (0.0, Some(msg))
    } else {
        (sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0), None)
    };
    PolicyScore { score: mean - params.lambda_risk * variance, mean, variance, warning }
}

/// Simplex weights minimizing `(Σ w_i Δ_i)² + λ₁‖w‖₁`. On the simplex the
/// L1 term is the constant `λ₁`, so only the quadratic picks the weights.
pub fn hedge_weights(deltas: &[f64], lambda: f64) -> DVector<f64> {
    assert!(!deltas.is_empty(), "need at least one instrument");
    if deltas.len() == 1 {
        return DVector::from_element(1, 1.0);
    }
    let m = DMatrix::from_row_slice(1, deltas.len(), deltas);
    simplex_qp(&m, lambda, 2_000, 1e-15).0
}

/// `(Σ w_i Δ_i)² + λ₁‖w‖₁`.
pub fn hedge_objective(deltas: &[f64], lambda: f64, w: &DVector<f64>) -> f64 {
    let exposure: f64 = deltas.iter().zip(w.iter()).map(|(d, w)| d * w).sum();
    exposure * exposure + lambda * w.lp_norm(1)
}

/// A holding with its price sensitivity per unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub units: f64,
    pub delta: f64,
}

/// `Σ ∂V_i/∂P + Σ ∂Φ_j/∂P`.
pub fn net_delta(assets: &[Position], derivatives: &[Position]) -> f64 {
    assets.iter().chain(derivatives).map(|p| p.units * p.delta).sum()
}

/// Central finite difference of `f` at `x`.
pub fn finite_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidityAllocation {
    /// Capital fraction per pool.
    pub levels: Vec<f64>,
    /// Running `Σ Δ_t` over ticks.
    pub integral: f64,
}

impl LiquidityAllocation {
    pub fn uniform(pools: usize) -> Self {
        LiquidityAllocation { levels: vec![1.0 / pools as f64; pools], integral: 0.0 }
    }
}

/// `L_i ← L_i + κ·∂Π/∂L_i − μ·∂Var/∂L_i + ν·∫Δ`, clipped to `[0, capital]`
/// and scaled so the total stays within `capital`. The integral advances
/// by `deviation` first. A non-finite gradient leaves the levels unchanged
/// and returns a diagnostic.
pub fn pid_update(
    alloc: &mut LiquidityAllocation,
    profit_grad: &[f64],
    risk_grad: &[f64],
    deviation: f64,
    capital: f64,
    params: &AgentParams,
) -> Option<String> {
    assert_eq!(profit_grad.len(), alloc.levels.len());
    assert_eq!(risk_grad.len(), alloc.levels.len());
    if deviation.is_finite() {
        alloc.integral += deviation;
    }
    if profit_grad.iter().chain(risk_grad).any(|g| !g.is_finite()) || !deviation.is_finite() {
        return Some("non-finite gradient: allocation frozen this block".into());
    }
    for (i, l) in alloc.levels.iter_mut().enumerate() {
        let next = *l + params.kappa * profit_grad[i] - params.mu * risk_grad[i] + params.nu * alloc.integral;
        *l = next.clamp(0.0, capital);
    }
    let total: f64 = alloc.levels.iter().sum();
    if total > capital {
        alloc.levels.iter_mut().for_each(|l| *l *= capital / total);
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ArbDecision {
    Execute { size: f64 },
    Skip,
}

/// Executes iff `(Δ − η)/τ − gas > 0`, with `gas` per unit notional.
pub fn arb_decide(deviation: f64, slippage: f64, latency: f64, gas: f64, size: f64) -> ArbDecision {
    assert!(latency >= 1.0, "latency is at least one tick");
    let margin = (deviation.abs() - slippage) / latency - gas;
    if margin > 0.0 && size > 0.0 {
        ArbDecision::Execute { size }
    } else {
        ArbDecision::Skip
    }
}

/// Relative execution slippage `p_e/p_s − 1` of paying `amount` in `dir`.
pub fn slippage(pool: &Pool, dir: Direction, amount: f64) -> f64 {
    let Ok(out) = pool.quote(dir, &amount) else { return f64::INFINITY };
    let spot = match dir {
        Direction::BuyStable => pool.reserve_b / pool.reserve_a,
        Direction::SellStable => pool.reserve_a / pool.reserve_b,
    };
    (amount / out) / spot - 1.0
}

/// Largest input in `[0, cap]` whose slippage stays at or below `limit`,
/// by bisection on pool quotes.
pub fn size_for_slippage(pool: &Pool, dir: Direction, limit: f64, cap: f64) -> f64 {
    if !(cap > 0.0) || !(limit > 0.0) {
        return 0.0;
    }
    if slippage(pool, dir, cap) <= limit {
        return cap;
    }
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..80 {
        let mid = (lo + hi) / 2.0;
        if slippage(pool, dir, mid) <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// EWMA variance of log-returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaVol {
    pub decay: f64,
    pub variance: f64,
    last: Option<f64>,
}

impl EwmaVol {
    pub fn new(decay: f64) -> Self {
        EwmaVol { decay, variance: 0.0, last: None }
    }

    pub fn push(&mut self, price: f64) {
        if let Some(prev) = self.last {
            let r = (price / prev).ln();
            self.variance = self.decay * self.variance + (1.0 - self.decay) * r * r;
        }
        self.last = Some(price);
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipAdversary {
    None,
    FrontRunner,
    WashTrader,
    LiquidityWithdrawer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationOutcome {
    pub adversary: ManipAdversary,
    pub violation: bool,
    /// Adversary capital did not exceed the agents' total capital.
    pub precondition_met: bool,
    pub longest_excursion: u64,
    pub max_deviation: f64,
}

/// One seeded run of the market with `adversary` active. A violation is an
/// excursion of `|Δ| > band` lasting more than the grace window.
pub fn manipulation_game(
    base: &ScenarioConfig,
    adversary: ManipAdversary,
    adversary_capital: f64,
    seed: u64,
) -> Result<ManipulationOutcome, ScenarioError> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.adversary = AdversaryConfig {
        kind: match adversary {
            ManipAdversary::None => AdversaryKind::None,
            ManipAdversary::FrontRunner => AdversaryKind::FrontRunner,
            ManipAdversary::WashTrader => AdversaryKind::WashTrader,
            ManipAdversary::LiquidityWithdrawer => AdversaryKind::LiquidityWithdrawer,
        },
        capital: adversary_capital,
    };
    let mut sim = Simulation::new(cfg.clone())?;
    let result = sim.run();
    let mut longest = 0u64;
    let mut current = 0u64;
    let mut max_dev = 0.0f64;
    for d in &result.trace.deviations {
        max_dev = max_dev.max(d.abs());
        if d.abs() > cfg.peg_band {
            current += 1;
            longest = longest.max(current);
        } else {
            current = 0;
        }
    }
    let agent_capital = if cfg.agents.enabled { cfg.agents.capital * cfg.agents.count as f64 } else { 0.0 };
    Ok(ManipulationOutcome {
        adversary,
        violation: longest > cfg.grace_window,
        precondition_met: adversary_capital <= agent_capital,
        longest_excursion: longest,
        max_deviation: max_dev,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManipulationReport {
    pub runs: u64,
    pub violations: u64,
    /// Violations in runs where the capital-adequacy precondition held.
    pub violations_with_precondition: u64,
    pub precondition_unmet_runs: u64,
}

/// Cycles through the adversaries with seeds derived from `seed`.
pub fn manipulation_harness(
    base: &ScenarioConfig,
    runs: u64,
    adversary_capital: f64,
    seed: u64,
) -> Result<ManipulationReport, ScenarioError> {
    let kinds = [
        ManipAdversary::None,
        ManipAdversary::FrontRunner,
        ManipAdversary::WashTrader,
        ManipAdversary::LiquidityWithdrawer,
    ];
    let mut report = ManipulationReport::default();
    for k in 0..runs {
        let o = manipulation_game(base, kinds[(k % 4) as usize], adversary_capital, seed.wrapping_add(k))?;
        report.runs += 1;
        report.violations += o.violation as u64;
        report.violations_with_precondition += (o.violation && o.precondition_met) as u64;
        report.precondition_unmet_runs += (!o.precondition_met) as u64;
    }
    Ok(report)
}
