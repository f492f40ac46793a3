//! Scenario configuration and the block-by-block market simulation: pools on
//! several chains, the vault, stabilization agents, background flow, shocks
//! and an optional adversary.

use std::path::Path;

use log::debug;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::amm::{Direction, Pool};
use crate::chain_sim::WorldConfig;
use crate::group::Ristretto;
use crate::market_ops::{
    arb_decide, finite_difference, hedge_weights, pid_update, policy_score, size_for_slippage, slippage, step_reward,
    AgentParams, ArbDecision, EwmaVol, LiquidityAllocation, PolicyScore,
};
use crate::metrics::{
    audit_impact_bound, concentration_band, fit_correction_model, hhi, liquidity_shares, peg_stats, recovery_check,
    Concentration, CorrectionFit, ImpactAudit, PegStats, RecoveryReport, ScenarioTrace, TraceRow,
};
use crate::swap_engine::{Outcome, Role, Strategy, SwapRun, SwapSetup, SwapTerms};
use crate::vault::{
    sfc_payoff, CollateralPosition, Deposit, Sfc, VaultHealth, VaultParams, VaultState, VolatilityWindow,
};

const BASELINE: &str = include_str!("../scenarios/baseline.toml");
const MANIPULATION: &str = include_str!("../scenarios/manipulation.toml");

const COLLATERAL: &str = "COL";
/// Step for the allocation gradients, in capital fractions.
const GRAD_STEP: f64 = 0.01;
/// Slack on the per-trade profit floor.
const EFFICIENCY_SLACK: f64 = 1e-4;
/// Largest post-hedge exposure as a fraction of portfolio value.
const HEDGE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{}{field}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, field: String, message: String },
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Horizon in blocks.
    pub blocks: u64,
    /// Peg band for `|Δ|`, as a fraction.
    pub peg_band: f64,
    /// Blocks an excursion outside the band may last.
    pub grace_window: u64,
    pub chains: ChainsConfig,
    pub pools: Vec<PoolConfig>,
    pub market: MarketConfig,
    pub vault: VaultConfig,
    pub agents: AgentsConfig,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default)]
    pub shocks: Vec<Shock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainsConfig {
    pub count: usize,
    /// Ticks per block, per chain.
    pub block_intervals: Vec<u64>,
    /// Message latency in ticks, `latency[from][to]`.
    pub latency: Vec<Vec<u64>>,
    /// Gas units per transaction.
    pub tx_fee: u64,
    /// Value of one gas unit in peg units.
    pub gas_price: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub reserve_stable: f64,
    pub reserve_collateral: f64,
    #[serde(default)]
    pub fee_bps: u32,
}

/// External market: the collateral's price and the background order flow.
/// Background flow pulls `ln p` toward the peg by `noise_reversion` per
/// block plus a Gaussian kick of size `noise_sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub collateral_price: f64,
    pub noise_sigma: f64,
    pub noise_reversion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaultConfig {
    pub initial_ratio: f64,
    pub liabilities: f64,
    #[serde(default)]
    pub params: VaultParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsConfig {
    pub enabled: bool,
    pub count: usize,
    /// Capital per agent in peg units, held half stable and half collateral.
    pub capital: f64,
    pub home_chain: u32,
    /// Replications behind each allocation gradient.
    pub replications: usize,
    /// Lot size of the futures used for hedging.
    pub hedge_lot: f64,
    #[serde(default)]
    pub params: AgentParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    #[default]
    None,
    FrontRunner,
    WashTrader,
    LiquidityWithdrawer,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    /// Capital in peg units.
    #[serde(default)]
    pub capital: f64,
}

/// Multiplies the collateral price at the end of `block`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shock {
    pub block: u64,
    pub multiplier: f64,
}

type Check = Result<(), (String, String)>;

fn ensure(ok: bool, field: impl Into<String>, message: impl Into<String>) -> Check {
    if ok {
        Ok(())
    } else {
        Err((field.into(), message.into()))
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(src: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(src).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(src, s.start)).unwrap_or((0, 0));
            ScenarioError::Parse { line, column, message: e.message().trim().to_string() }
        })?;
        cfg.check().map_err(|(field, message)| ScenarioError::Invalid { line: anchor(src, &field), field, message })?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The bundled baseline: three chains, a −5% shock at block 100.
    pub fn baseline() -> Self {
        Self::from_toml_str(BASELINE).expect("bundled baseline scenario is valid")
    }

    /// The bundled base for the manipulation game: a −2% shock at block 20.
    pub fn manipulation() -> Self {
        Self::from_toml_str(MANIPULATION).expect("bundled manipulation scenario is valid")
    }

    pub fn baseline_toml() -> &'static str {
        BASELINE
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.check().map_err(|(field, message)| ScenarioError::Invalid { line: None, field, message })
    }

    fn check(&self) -> Check {
        let n = self.chains.count;
        ensure(self.blocks >= 1, "blocks", "must be at least 1")?;
        ensure(self.peg_band > 0.0 && self.peg_band < 1.0, "peg_band", "must be in (0, 1)")?;
        ensure(self.grace_window >= 1, "grace_window", "must be at least 1")?;

        ensure((1..=16).contains(&n), "chains.count", "must be between 1 and 16")?;
        ensure(self.chains.block_intervals.len() == n, "chains.block_intervals", format!("needs {n} entries"))?;
        ensure(self.chains.block_intervals.iter().all(|&b| b >= 1), "chains.block_intervals", "intervals must be ≥ 1")?;
        ensure(
            self.chains.latency.len() == n && self.chains.latency.iter().all(|r| r.len() == n),
            "chains.latency",
            format!("must be a {n}x{n} matrix"),
        )?;
        ensure(self.chains.gas_price >= 0.0 && self.chains.gas_price.is_finite(), "chains.gas_price", "must be ≥ 0")?;

        ensure(self.pools.len() == n, "pools", format!("needs one pool per chain ({n})"))?;
        for (i, p) in self.pools.iter().enumerate() {
            ensure(p.reserve_stable > 0.0 && p.reserve_stable.is_finite(), format!("pools[{i}].reserve_stable"), "must be positive")?;
            ensure(
                p.reserve_collateral > 0.0 && p.reserve_collateral.is_finite(),
                format!("pools[{i}].reserve_collateral"),
                "must be positive",
            )?;
            ensure(p.fee_bps < 10_000, format!("pools[{i}].fee_bps"), "must be below 10000")?;
        }

        let m = &self.market;
        ensure(m.collateral_price > 0.0 && m.collateral_price.is_finite(), "market.collateral_price", "must be positive")?;
        ensure(m.noise_sigma >= 0.0 && m.noise_sigma < 0.1, "market.noise_sigma", "must be in [0, 0.1)")?;
        ensure((0.0..1.0).contains(&m.noise_reversion), "market.noise_reversion", "must be in [0, 1)")?;

        let v = &self.vault;
        let p = &v.params;
        ensure(p.c_min >= 1.2, "vault.params.c_min", format!("{} is below the 1.2 minimum", p.c_min))?;
        ensure(p.c_warn > p.c_min, "vault.params.c_warn", "must exceed c_min")?;
        ensure(
            p.recovery_floor >= p.c_min && p.recovery_floor <= p.c_warn,
            "vault.params.recovery_floor",
            "must lie in [c_min, c_warn]",
        )?;
        ensure(p.alpha >= 0.0 && p.alpha.is_finite(), "vault.params.alpha", "must be ≥ 0")?;
        ensure(p.gamma >= 0.0 && p.gamma.is_finite(), "vault.params.gamma", "must be ≥ 0")?;
        ensure(p.beta > 0.0 && p.beta.is_finite(), "vault.params.beta", "must be positive")?;
        ensure(p.peg > 0.0 && p.peg.is_finite(), "vault.params.peg", "must be positive")?;
        ensure(p.rebalance_lambda >= 0.0, "vault.params.rebalance_lambda", "must be ≥ 0")?;
        ensure(p.vol_window >= 2, "vault.params.vol_window", "must be at least 2")?;
        ensure(v.initial_ratio >= p.c_min, "vault.initial_ratio", "must be at least c_min")?;
        ensure(v.liabilities > 0.0 && v.liabilities.is_finite(), "vault.liabilities", "must be positive")?;

        let a = &self.agents;
        let ap = &a.params;
        ensure(a.count <= 64, "agents.count", "at most 64 agents")?;
        ensure(a.capital >= 0.0 && a.capital.is_finite(), "agents.capital", "must be ≥ 0")?;
        ensure((a.home_chain as usize) < n, "agents.home_chain", "must name a configured chain")?;
        ensure(a.replications >= 1, "agents.replications", "must be at least 1")?;
        ensure(a.hedge_lot > 0.0, "agents.hedge_lot", "must be positive")?;
        ensure(ap.gamma_discount > 0.0 && ap.gamma_discount < 1.0, "agents.params.gamma_discount", "must be in (0, 1)")?;
        ensure(ap.lambda_risk >= 0.0, "agents.params.lambda_risk", "must be ≥ 0")?;
        ensure(ap.kappa >= 0.0, "agents.params.kappa", "must be ≥ 0")?;
        ensure(ap.mu >= 0.0, "agents.params.mu", "must be ≥ 0")?;
        ensure(ap.nu >= 0.0, "agents.params.nu", "must be ≥ 0")?;
        ensure(ap.lambda_hedge >= 0.0, "agents.params.lambda_hedge", "must be ≥ 0")?;
        ensure(ap.deviation_clamp > 0.0, "agents.params.deviation_clamp", "must be positive")?;
        ensure(ap.ewma_decay > 0.0 && ap.ewma_decay < 1.0, "agents.params.ewma_decay", "must be in (0, 1)")?;

        ensure(self.adversary.capital >= 0.0 && self.adversary.capital.is_finite(), "adversary.capital", "must be ≥ 0")?;
        for (i, s) in self.shocks.iter().enumerate() {
            ensure(s.block >= 1, format!("shocks[{i}].block"), "blocks start at 1")?;
            ensure(s.multiplier > 0.0 && s.multiplier.is_finite(), format!("shocks[{i}].multiplier"), "must be positive")?;
        }
        Ok(())
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

/// Line of the key named by a dotted `field` such as `vault.params.c_min`
/// or `pools[1].fee_bps`, if it appears in `src`.
fn anchor(src: &str, field: &str) -> Option<usize> {
    let (table, key) = match field.rsplit_once('.') {
        Some((t, k)) => (t.to_string(), k),
        None => (String::new(), field),
    };
    let (table, index) = match table.split_once('[') {
        Some((t, rest)) => (t.to_string(), rest.trim_end_matches(']').parse::<usize>().ok()),
        None => (table, None),
    };
    let mut current = String::new();
    let mut seen = 0usize;
    let mut table_line = None;
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            current = h.trim().to_string();
            if current == table {
                seen += 1;
            }
        } else if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = h.trim().to_string();
        } else {
            let matches_key = line
                .strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='));
            let right_entry = index.map_or(true, |ix| seen == ix + 1);
            if current == table && right_entry && matches_key {
                return Some(i + 1);
            }
            continue;
        }
        if current == table && index.map_or(true, |ix| seen == ix + 1) && table_line.is_none() {
            table_line = Some(i + 1);
        }
    }
    table_line
}

/// A failed run-time assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breach {
    pub block: u64,
    pub invariant: String,
    pub detail: String,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SimEvent {
    Shock { block: u64, multiplier: f64, collateral_price: f64 },
    Arbitrage {
        block: u64,
        agent: usize,
        chain: u32,
        direction: Direction,
        amount_in: f64,
        amount_out: f64,
        slippage: f64,
        latency: f64,
        gas: f64,
        profit: f64,
    },
    Settlement { block: u64, agent: usize, chain: u32, outcome: Outcome, ticks: Option<u64>, gas_units: u64 },
    Mint { block: u64, agent: usize, deposit: f64, minted: f64, deviation: f64, sigma: f64 },
    MintRejected { block: u64, agent: usize, reason: String },
    Redeem { block: u64, agent: usize, burned: f64, paid: f64 },
    Rebalance { block: u64, ratio_before: f64, ratio_after: f64, burned: f64, diagnostic: Option<String> },
    Liquidation { block: u64, ratio_before: f64, ratio_after: f64, closed: f64, insolvent: bool },
    Adversary { block: u64, kind: AdversaryKind, chain: u32, volume: f64 },
    Diagnostic { block: u64, agent: usize, message: String },
    Breach { block: u64, invariant: String, detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageStats {
    pub executed: u64,
    pub skipped: u64,
    pub settlements: u64,
    pub failed_settlements: u64,
    /// Trades whose realized margin fell below `(|Δ| − η)/τ − gas`.
    pub efficiency_failures: u64,
    pub max_latency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VaultSummary {
    pub initial_ratio: f64,
    pub min_ratio: f64,
    pub final_ratio: f64,
    pub insolvent: bool,
    pub mints: u64,
    pub mints_rejected: u64,
    pub redeems: u64,
    pub rebalances: u64,
    pub liquidations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub blocks_requested: u64,
    pub blocks_run: u64,
    pub agents_enabled: bool,
    pub adversary: AdversaryKind,
    pub peg: PegStats,
    pub recovery: Vec<RecoveryReport>,
    /// Every tagged shock re-entered the band within the grace window.
    pub recovered: bool,
    pub correction_fit: Option<CorrectionFit>,
    pub correction_fit_error: Option<String>,
    pub impact_audit: ImpactAudit,
    pub hhi: Option<f64>,
    pub concentration: Option<Concentration>,
    pub policy: Option<PolicyScore>,
    pub arbitrage: ArbitrageStats,
    pub max_hedge_ratio: f64,
    pub vault: VaultSummary,
    pub breaches: Vec<Breach>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub trace: ScenarioTrace,
    pub summary: RunSummary,
    pub events: Vec<SimEvent>,
    pub breaches: Vec<Breach>,
}

impl RunResult {
    pub fn events_jsonl(&self) -> String {
        self.events.iter().map(|e| serde_json::to_string(e).expect("events serialize") + "\n").collect()
    }
}

#[derive(Debug, Clone)]
struct Agent {
    stable: f64,
    collateral: f64,
    target_stable: f64,
    alloc: LiquidityAllocation,
    rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Settlement {
    latency: f64,
    gas_units: u64,
    settled: bool,
}

/// Seed for a sub-experiment, derived from the run seed and coordinates.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_be_bytes());
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Marked-to-peg profit of paying `amount_in` for `amount_out`.
fn trade_profit(dir: Direction, amount_in: f64, amount_out: f64, collateral_price: f64, peg: f64) -> f64 {
    match dir {
        Direction::BuyStable => amount_out * peg - amount_in * collateral_price,
        Direction::SellStable => amount_out * collateral_price - amount_in * peg,
    }
}

/// Trade moving a pool's stable price toward `target_spot` (collateral per stable).
fn flow_toward(pool: &Pool, target_spot: f64) -> Option<(Direction, f64)> {
    let spot = pool.spot_price();
    let (dir, x) = if target_spot > spot {
        (Direction::BuyStable, pool.input_to_reach_spot(target_spot))
    } else {
        (Direction::SellStable, pool.stable_input_to_reach_spot(target_spot))
    };
    (x > 0.0 && x.is_finite()).then_some((dir, x))
}

pub struct Simulation {
    cfg: ScenarioConfig,
    pools: Vec<Pool>,
    collateral_price: f64,
    vault: VaultState,
    vol: VolatilityWindow,
    ewma: EwmaVol,
    agents: Vec<Agent>,
    noise_rng: ChaCha8Rng,
    adversary_spent: f64,
    withdrawn: f64,
    trace: ScenarioTrace,
    events: Vec<SimEvent>,
    breaches: Vec<Breach>,
    arb: ArbitrageStats,
    vault_stats: VaultSummary,
    max_hedge_ratio: f64,
    block: u64,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let n = cfg.chains.count;
        let pools = cfg
            .pools
            .iter()
            .enumerate()
            .map(|(k, p)| Pool::new(p.reserve_stable, p.reserve_collateral, p.fee_bps, k as u32))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ScenarioError::Invalid { line: None, field: "pools".into(), message: e.to_string() })?;
        let price = cfg.market.collateral_price;
        let vp = cfg.vault.params;
        let per_chain = cfg.vault.initial_ratio * cfg.vault.liabilities * vp.peg / price / n as f64;
        let positions = (0..n)
            .map(|k| CollateralPosition { asset: COLLATERAL.into(), chain: k as u32, quantity: per_chain })
            .collect();
        let mut vault = VaultState::new(positions, [(COLLATERAL.to_string(), price)].into_iter().collect(), vp);
        vault.liabilities.push(Sfc { quantity: cfg.vault.liabilities, mint_block: 0 });
        let agent_count = if cfg.agents.enabled { cfg.agents.count } else { 0 };
        let agents = (0..agent_count)
            .map(|_| Agent {
                stable: cfg.agents.capital / 2.0 / vp.peg,
                collateral: cfg.agents.capital / 2.0 / price,
                target_stable: cfg.agents.capital / 2.0 / vp.peg,
                alloc: LiquidityAllocation::uniform(n),
                rewards: Vec::new(),
            })
            .collect();
        let initial_ratio = vault.collateral_ratio();
        Ok(Simulation {
            pools,
            collateral_price: price,
            vol: VolatilityWindow::new(vp.vol_window),
            ewma: EwmaVol::new(cfg.agents.params.ewma_decay),
            vault,
            agents,
            noise_rng: ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x6e6f_6973_65])),
            adversary_spent: 0.0,
            withdrawn: 1.0,
            trace: ScenarioTrace { chains: n as u32, ..Default::default() },
            events: Vec::new(),
            breaches: Vec::new(),
            arb: ArbitrageStats::default(),
            vault_stats: VaultSummary { initial_ratio, min_ratio: initial_ratio, ..Default::default() },
            max_hedge_ratio: 0.0,
            block: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn block(&self) -> u64 {
        self.block
    }

    pub fn pools(&self) -> &[Pool] {
        &self.pools
    }

    pub fn vault(&self) -> &VaultState {
        &self.vault
    }

    fn peg(&self) -> f64 {
        self.cfg.vault.params.peg
    }

    /// Price of the stable on chain `k` in peg units.
    pub fn stable_price(&self, k: usize) -> f64 {
        self.pools[k].spot_price() * self.collateral_price
    }

    pub fn deviation(&self, k: usize) -> f64 {
        (self.stable_price(k) - self.peg()) / self.peg()
    }

    /// Stable-reserve-weighted mean deviation across chains.
    pub fn aggregate_deviation(&self) -> f64 {
        let total: f64 = self.pools.iter().map(|p| p.reserve_a).sum();
        (0..self.pools.len()).map(|k| self.pools[k].reserve_a * self.deviation(k)).sum::<f64>() / total
    }

    fn breach(&mut self, invariant: &str, detail: String) {
        let b = Breach { block: self.block, invariant: invariant.into(), detail: detail.clone() };
        self.events.push(SimEvent::Breach { block: self.block, invariant: invariant.into(), detail });
        self.breaches.push(b);
    }

    /// Runs to the horizon or the first invariant breach.
    pub fn run(&mut self) -> RunResult {
        while self.block < self.cfg.blocks && self.breaches.is_empty() {
            self.step();
        }
        RunResult {
            summary: self.summary(),
            trace: self.trace.clone(),
            events: self.events.clone(),
            breaches: self.breaches.clone(),
        }
    }

    /// Advances one block.
    pub fn step(&mut self) {
        self.block += 1;
        let n = self.pools.len();
        let mut volume = vec![0.0; n];
        let mut reward = vec![0.0; n];
        for a in 0..self.agents.len() {
            self.agent_act(a, &mut volume, &mut reward);
        }
        self.adversary_act();
        let shocks: Vec<Shock> = self.cfg.shocks.iter().copied().filter(|s| s.block == self.block).collect();
        for s in shocks {
            self.collateral_price *= s.multiplier;
            self.trace.shocks.push(self.block);
            self.events.push(SimEvent::Shock {
                block: self.block,
                multiplier: s.multiplier,
                collateral_price: self.collateral_price,
            });
        }
        self.background_flow();
        self.maintain_vault();
        self.record(&volume, &reward);
        self.update_allocations();
        self.check_invariants();
    }

    /// Runs the settlement leg for moving `notional` from the home chain to
    /// `chain` as an honest adaptor-signature swap on a fresh two-chain world.
    fn settle(&mut self, agent: usize, chain: u32, notional: f64) -> Settlement {
        let c = &self.cfg.chains;
        let home = self.cfg.agents.home_chain as usize;
        let k = chain as usize;
        let mut world = WorldConfig::uniform(2, 1, 1, c.tx_fee);
        world.chains[0].block_interval = c.block_intervals[home];
        world.chains[1].block_interval = c.block_intervals[k];
        world.latency = vec![vec![c.latency[home][home], c.latency[home][k]], vec![c.latency[k][home], c.latency[k][k]]];
        let amount = notional.round().max(1.0) as u64;
        let gas = 100 * c.tx_fee.max(1);
        let setup = SwapSetup {
            world,
            terms: SwapTerms {
                label: format!("settle-{}-{agent}-{chain}", self.block),
                chain_i: 0,
                asset_x: COLLATERAL.into(),
                amount_x: amount,
                chain_j: 1,
                asset_y: COLLATERAL.into(),
                amount_y: amount,
                window_ticks: 60,
            },
            funding_a: amount,
            funding_b: amount,
            gas,
        };
        let seed = derive_seed(&[self.cfg.seed, self.block, chain as u64, agent as u64]);
        let fee_asset = setup.world.fee_asset.clone();
        let result = SwapRun::<Ristretto>::new(&setup, Strategy::HONEST, seed).map(|mut run| {
            let outcome = run.run_to_completion();
            let left: u64 = [Role::A, Role::B]
                .iter()
                .flat_map(|&r| (0..2u32).map(move |ch| (r, ch)))
                .map(|(r, ch)| run.balance(r, ch, &fee_asset))
                .sum();
            (outcome, 4 * gas - left)
        });
        let (outcome, ticks, gas_units) = match result {
            Ok((o, used)) => (o.outcome, o.settle_ticks, used),
            Err(_) => (Outcome::BothRefunded, None, 0),
        };
        self.arb.settlements += 1;
        let settled = outcome == Outcome::BothSettled;
        if !settled {
            self.arb.failed_settlements += 1;
        }
        self.events.push(SimEvent::Settlement { block: self.block, agent, chain, outcome, ticks, gas_units });
        Settlement { latency: ticks.unwrap_or(1).max(1) as f64, gas_units, settled }
    }

    fn agent_act(&mut self, a: usize, volume: &mut [f64], reward: &mut [f64]) {
        let n = self.pools.len();
        let peg = self.peg();
        let params = self.cfg.agents.params;
        let capital = self.cfg.agents.capital;
        let home = self.cfg.agents.home_chain;
        let mut block_reward = 0.0;
        for k in 0..n {
            let dev = self.deviation(k);
            let mut profit = 0.0;
            if dev.abs() > 0.0 {
                let dir = if dev < 0.0 { Direction::BuyStable } else { Direction::SellStable };
                let (price_in, held) = match dir {
                    Direction::BuyStable => (self.collateral_price, self.agents[a].collateral),
                    Direction::SellStable => (peg, self.agents[a].stable),
                };
                let cap = (self.agents[a].alloc.levels[k] * capital / price_in).min(held).max(0.0);
                let size = size_for_slippage(&self.pools[k], dir, dev.abs() / 2.0, cap);
                let eta = if size > 0.0 { slippage(&self.pools[k], dir, size) } else { f64::INFINITY };
                let notional = size * price_in;
                let (latency, gas_units, settled) = if size <= 0.0 {
                    (1.0, 0, false)
                } else if k as u32 == home {
                    (1.0, self.cfg.chains.tx_fee, true)
                } else {
                    let s = self.settle(a, k as u32, notional);
                    (s.latency, s.gas_units, s.settled)
                };
                let gas = gas_units as f64 * self.cfg.chains.gas_price;
                let decision = if settled {
                    arb_decide(dev, eta, latency, gas / notional, size)
                } else {
                    ArbDecision::Skip
                };
                match decision {
                    ArbDecision::Execute { size } => {
                        profit = self.execute_arbitrage(a, k, dir, size, dev, eta, latency, gas, volume);
                    }
                    ArbDecision::Skip => self.arb.skipped += 1,
                }
            }
            let r = step_reward(profit, dev, &params);
            reward[k] += r;
            block_reward += r;
        }
        self.agents[a].rewards.push(block_reward);
        self.manage_inventory(a);
        self.hedge(a);
    }

    #[allow(clippy::too_many_arguments)]
    fn execute_arbitrage(
        &mut self,
        a: usize,
        k: usize,
        dir: Direction,
        size: f64,
        dev: f64,
        eta: f64,
        latency: f64,
        gas: f64,
        volume: &mut [f64],
    ) -> f64 {
        let peg = self.peg();
        let front = self.front_run(k, dir, size);
        let Ok((out, rec)) = self.pools[k].execute(dir, &size) else {
            self.arb.skipped += 1;
            return 0.0;
        };
        self.trace.trades.push(rec);
        if let Some((back_dir, amount)) = front {
            if let Ok((back_out, rec)) = self.pools[k].execute(back_dir, &amount) {
                self.trace.trades.push(rec);
                self.events.push(SimEvent::Adversary {
                    block: self.block,
                    kind: AdversaryKind::FrontRunner,
                    chain: k as u32,
                    volume: back_out,
                });
            }
        }
        let agent = &mut self.agents[a];
        match dir {
            Direction::BuyStable => {
                agent.collateral -= size;
                agent.stable += out;
                volume[k] += out;
            }
            Direction::SellStable => {
                agent.stable -= size;
                agent.collateral += out;
                volume[k] -= size;
            }
        }
        let price_in = if dir == Direction::BuyStable { self.collateral_price } else { peg };
        let notional = size * price_in;
        let profit = trade_profit(dir, size, out, self.collateral_price, peg) - gas;
        let floor = (dev.abs() - eta) / latency - gas / notional;
        if profit / notional < floor - EFFICIENCY_SLACK {
            self.arb.efficiency_failures += 1;
        }
        self.arb.executed += 1;
        self.arb.max_latency = self.arb.max_latency.max(latency);
        self.events.push(SimEvent::Arbitrage {
            block: self.block,
            agent: a,
            chain: k as u32,
            direction: dir,
            amount_in: size,
            amount_out: out,
            slippage: eta,
            latency,
            gas,
            profit,
        });
        profit
    }

    /// A front-runner with mempool visibility trades ahead of the agent in
    /// the same direction. Returns the unwinding trade to place after it.
    fn front_run(&mut self, k: usize, dir: Direction, size: f64) -> Option<(Direction, f64)> {
        if self.cfg.adversary.kind != AdversaryKind::FrontRunner {
            return None;
        }
        let price_in = if dir == Direction::BuyStable { self.collateral_price } else { self.peg() };
        let amount = size.min(self.cfg.adversary.capital / price_in);
        if !(amount > 0.0) {
            return None;
        }
        let (out, rec) = self.pools[k].execute(dir, &amount).ok()?;
        self.trace.trades.push(rec);
        self.events.push(SimEvent::Adversary {
            block: self.block,
            kind: AdversaryKind::FrontRunner,
            chain: k as u32,
            volume: amount,
        });
        let back = match dir {
            Direction::BuyStable => Direction::SellStable,
            Direction::SellStable => Direction::BuyStable,
        };
        Some((back, out))
    }

    /// Mints against collateral when stable runs low and redeems surplus.
    fn manage_inventory(&mut self, a: usize) {
        let peg = self.peg();
        let home = self.cfg.agents.home_chain as usize;
        let (stable, collateral, target) = {
            let ag = &self.agents[a];
            (ag.stable, ag.collateral, ag.target_stable)
        };
        if stable < 0.5 * target {
            let want = (target - stable) * peg / self.collateral_price;
            let deposit = want.min(0.5 * collateral);
            if deposit <= 0.0 {
                return;
            }
            let deviation = self.aggregate_deviation();
            let sigma = self.vol.sigma();
            match self.vault.mint_sfc(Deposit { position: home, quantity: deposit }, deviation, sigma, self.block) {
                Ok(minted) => {
                    self.agents[a].collateral -= deposit;
                    self.agents[a].stable += minted;
                    self.vault_stats.mints += 1;
                    self.events.push(SimEvent::Mint { block: self.block, agent: a, deposit, minted, deviation, sigma });
                }
                Err(e) => {
                    self.vault_stats.mints_rejected += 1;
                    self.events.push(SimEvent::MintRejected { block: self.block, agent: a, reason: e.to_string() });
                }
            }
        } else if stable > 2.0 * target {
            let amount = stable - target;
            match self.vault.redeem(amount, home) {
                Ok(paid) => {
                    self.agents[a].stable -= amount;
                    self.agents[a].collateral += paid;
                    self.vault_stats.redeems += 1;
                    self.events.push(SimEvent::Redeem { block: self.block, agent: a, burned: amount, paid });
                }
                Err(e) => self.events.push(SimEvent::Diagnostic {
                    block: self.block,
                    agent: a,
                    message: format!("redeem failed: {e}"),
                }),
            }
        }
    }

    /// Offsets the stable inventory with futures lots and SFCs and checks the
    /// residual exposure.
    fn hedge(&mut self, a: usize) {
        let peg = self.peg();
        let vp = self.cfg.vault.params;
        let params = self.cfg.agents.params;
        let lot = self.cfg.agents.hedge_lot;
        let price = peg * (1.0 + self.aggregate_deviation());
        let (stable, collateral) = (self.agents[a].stable, self.agents[a].collateral);
        let value = stable * price + collateral * self.collateral_price;
        // Candidate books, each holding the inventory plus one hedge; the
        // entries are their residual exposures to the stable price.
        let lots = (stable / lot).floor();
        let sigma = self.ewma.sigma();
        let sfc_delta = finite_difference(|p| sfc_payoff(p, peg, sigma, vp.alpha, vp.beta), price, 1e-7);
        let sfc_residual = if sfc_delta != 0.0 { stable + (stable / -sfc_delta).round() * sfc_delta } else { stable };
        let residuals = [stable - lots * lot, stable - (lots + 1.0) * lot, sfc_residual];
        let w = hedge_weights(&residuals, params.lambda_hedge);
        let exposure: f64 = residuals.iter().zip(w.iter()).map(|(r, w)| r * w).sum();
        let ratio = if value > 0.0 { exposure.abs() / value } else { 0.0 };
        self.max_hedge_ratio = self.max_hedge_ratio.max(ratio);
        if ratio > HEDGE_TOLERANCE {
            self.breach("hedge_exposure", format!("agent {a}: exposure {exposure:.6} is {ratio:.2e} of value"));
        }
    }

    fn adversary_act(&mut self) {
        let adv = self.cfg.adversary;
        let n = self.pools.len();
        let peg = self.peg();
        match adv.kind {
            AdversaryKind::None | AdversaryKind::FrontRunner => {}
            AdversaryKind::WashTrader => {
                for k in 0..n {
                    let x = adv.capital / n as f64 / self.collateral_price;
                    if !(x > 0.0) {
                        continue;
                    }
                    if let Ok((out, rec)) = self.pools[k].execute(Direction::BuyStable, &x) {
                        self.trace.trades.push(rec);
                        if let Ok((_, rec)) = self.pools[k].execute(Direction::SellStable, &out) {
                            self.trace.trades.push(rec);
                        }
                        self.events.push(SimEvent::Adversary {
                            block: self.block,
                            kind: adv.kind,
                            chain: k as u32,
                            volume: 2.0 * x * self.collateral_price,
                        });
                    }
                }
            }
            AdversaryKind::LiquidityWithdrawer => {
                if self.withdrawn > 0.5 {
                    self.withdrawn *= 0.98;
                    for p in &mut self.pools {
                        let _ = p.scale_liquidity(&0.98);
                    }
                }
                let dump = (0.05 * adv.capital).min(adv.capital - self.adversary_spent);
                if dump > 0.0 {
                    self.adversary_spent += dump;
                    for k in 0..n {
                        let x = dump / n as f64 / peg;
                        if let Ok((_, rec)) = self.pools[k].execute(Direction::SellStable, &x) {
                            self.trace.trades.push(rec);
                            self.events.push(SimEvent::Adversary {
                                block: self.block,
                                kind: adv.kind,
                                chain: k as u32,
                                volume: x,
                            });
                        }
                    }
                }
            }
        }
    }

    /// Background order flow: each pool's log price reverts toward the peg
    /// and takes a Gaussian kick.
    fn background_flow(&mut self) {
        let m = self.cfg.market;
        let peg = self.peg();
        for k in 0..self.pools.len() {
            let eps: f64 = StandardNormal.sample(&mut self.noise_rng);
            let ln_p = (self.stable_price(k) / peg).ln();
            let target = ((1.0 - m.noise_reversion) * ln_p + m.noise_sigma * eps).exp() * peg;
            if let Some((dir, x)) = flow_toward(&self.pools[k], target / self.collateral_price) {
                if let Ok((_, rec)) = self.pools[k].execute(dir, &x) {
                    self.trace.trades.push(rec);
                }
            }
        }
    }

    fn maintain_vault(&mut self) {
        self.vault.prices.insert(COLLATERAL.into(), self.collateral_price);
        match self.vault.health() {
            VaultHealth::Healthy => {}
            VaultHealth::Warning => {
                let out = self.vault.rebalance_with_pools(&mut self.pools);
                self.vault_stats.rebalances += 1;
                self.trace.trades.extend(out.trades);
                self.events.push(SimEvent::Rebalance {
                    block: self.block,
                    ratio_before: out.ratio_before,
                    ratio_after: out.ratio_after,
                    burned: out.burned,
                    diagnostic: out.diagnostic,
                });
            }
            VaultHealth::Liquidation => {
                if let Ok(out) = self.vault.liquidate_partial(&mut self.pools) {
                    self.vault_stats.liquidations += 1;
                    self.trace.trades.extend(out.trades);
                    self.events.push(SimEvent::Liquidation {
                        block: self.block,
                        ratio_before: out.ratio_before,
                        ratio_after: out.ratio_after,
                        closed: out.closed,
                        insolvent: out.insolvent,
                    });
                }
            }
        }
        let c = self.vault.collateral_ratio();
        self.vault_stats.min_ratio = self.vault_stats.min_ratio.min(c);
    }

    fn record(&mut self, volume: &[f64], reward: &[f64]) {
        let c = self.vault.collateral_ratio();
        for (k, pool) in self.pools.iter().enumerate() {
            let price = pool.spot_price() * self.collateral_price;
            self.trace.rows.push(TraceRow {
                block: self.block,
                chain: k as u32,
                price,
                deviation: (price - self.peg()) / self.peg(),
                c_ratio: c,
                reserve_a: pool.reserve_a,
                reserve_b: pool.reserve_b,
                arb_volume: volume[k],
                reward: reward[k],
            });
        }
        let agg = self.aggregate_deviation();
        self.trace.deviations.push(agg);
        self.trace.arb_volumes.push(volume.iter().sum());
        let p = self.peg() * (1.0 + agg);
        self.vol.push(p);
        self.ewma.push(p);
    }

    /// Mean and variance of the marked-to-peg profit per unit capital of an
    /// arbitrage on chain `k` with allocation `level`, over noise
    /// replications shared by every level so that differences are paired.
    fn profit_proxy(&self, k: usize, level: f64) -> (f64, f64) {
        let capital = self.cfg.agents.capital;
        if !(capital > 0.0) {
            return (0.0, 0.0);
        }
        let reps = self.cfg.agents.replications;
        let peg = self.peg();
        let sigma = self.ewma.sigma().max(self.cfg.market.noise_sigma);
        let mut samples = Vec::with_capacity(reps);
        for r in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, self.block, k as u64, r as u64]));
            let eps: f64 = StandardNormal.sample(&mut rng);
            let mut pool = self.pools[k].clone();
            let ln_p = (self.stable_price(k) / peg).ln() + sigma * eps;
            if let Some((dir, x)) = flow_toward(&pool, ln_p.exp() * peg / self.collateral_price) {
                let _ = pool.execute(dir, &x);
            }
            let dev = pool.spot_price() * self.collateral_price / peg - 1.0;
            let dir = if dev < 0.0 { Direction::BuyStable } else { Direction::SellStable };
            let price_in = if dir == Direction::BuyStable { self.collateral_price } else { peg };
            let size = size_for_slippage(&pool, dir, dev.abs() / 2.0, level * capital / price_in);
            let profit = match pool.execute(dir, &size) {
                Ok((out, _)) if size > 0.0 => trade_profit(dir, size, out, self.collateral_price, peg),
                _ => 0.0,
            };
            samples.push(profit / capital);
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var)
    }

    fn update_allocations(&mut self) {
        if self.agents.is_empty() {
            return;
        }
        let n = self.pools.len();
        let deviation = self.aggregate_deviation();
        let params = self.cfg.agents.params;
        for a in 0..self.agents.len() {
            let mut pg = vec![0.0; n];
            let mut rg = vec![0.0; n];
            for k in 0..n {
                let l = self.agents[a].alloc.levels[k];
                let (m_hi, v_hi) = self.profit_proxy(k, l + GRAD_STEP);
                let (m_lo, v_lo) = self.profit_proxy(k, (l - GRAD_STEP).max(0.0));
                let width = l + GRAD_STEP - (l - GRAD_STEP).max(0.0);
                pg[k] = (m_hi - m_lo) / width;
                rg[k] = (v_hi - v_lo) / width;
            }
            if let Some(message) = pid_update(&mut self.agents[a].alloc, &pg, &rg, deviation, 1.0, &params) {
                self.events.push(SimEvent::Diagnostic { block: self.block, agent: a, message });
            }
            debug!("block {} agent {a} levels {:?}", self.block, self.agents[a].alloc.levels);
        }
    }

    fn check_invariants(&mut self) {
        for k in 0..self.pools.len() {
            let p = &self.pools[k];
            if !(p.reserve_a > 0.0 && p.reserve_b > 0.0 && p.reserve_a.is_finite() && p.reserve_b.is_finite()) {
                let detail = format!("chain {k}: reserves {} / {}", p.reserve_a, p.reserve_b);
                self.breach("pool_reserves", detail);
            }
        }
        for a in 0..self.agents.len() {
            let ag = &self.agents[a];
            if ag.stable < -1e-9 || ag.collateral < -1e-9 {
                let detail = format!("agent {a}: stable {} collateral {}", ag.stable, ag.collateral);
                self.breach("agent_balance", detail);
            }
        }
        let c = self.vault.collateral_ratio();
        if c < self.cfg.vault.params.c_min && !self.vault.insolvent {
            self.breach("vault_ratio", format!("ratio {c:.6} below minimum without an insolvency flag"));
        }
        let start = self.trace.rows.len() - self.pools.len();
        if let Some(r) = self.trace.rows[start..].iter().find(|r| {
            ![r.price, r.deviation, r.c_ratio, r.reserve_a, r.reserve_b, r.arb_volume, r.reward]
                .iter()
                .all(|v| v.is_finite())
        }) {
            let detail = format!("chain {}: non-finite trace entry", r.chain);
            self.breach("trace_row", detail);
        }
    }

    pub fn summary(&self) -> RunSummary {
        let cfg = &self.cfg;
        let shocks = self.trace.shock_indices();
        let band = cfg.peg_band;
        let window = cfg.grace_window as usize;
        let recovery: Vec<RecoveryReport> =
            shocks.iter().map(|&s| recovery_check(&self.trace.deviations, &shocks, s, band, window)).collect();
        let (correction_fit, correction_fit_error) =
            match fit_correction_model(&self.trace.deviations, &self.trace.arb_volumes, &shocks) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
        let shares = liquidity_shares(&self.pools.iter().map(|p| p.reserve_a).collect::<Vec<_>>());
        let index = hhi(&shares).ok();
        let policy = (!self.agents.is_empty() && self.block > 0).then(|| {
            let per_block: Vec<f64> =
                (0..self.block as usize).map(|t| self.agents.iter().map(|a| a.rewards[t]).sum()).collect();
            policy_score(&[per_block], &cfg.agents.params)
        });
        RunSummary {
            scenario: cfg.name.clone(),
            seed: cfg.seed,
            blocks_requested: cfg.blocks,
            blocks_run: self.block,
            agents_enabled: cfg.agents.enabled,
            adversary: cfg.adversary.kind,
            peg: peg_stats(&self.trace.deviations, &shocks, band),
            recovered: recovery.iter().all(|r| r.recovered),
            recovery,
            correction_fit,
            correction_fit_error,
            impact_audit: audit_impact_bound(&self.trace.trades, 0.01),
            hhi: index,
            concentration: index.map(concentration_band),
            policy,
            arbitrage: self.arb.clone(),
            max_hedge_ratio: self.max_hedge_ratio,
            vault: VaultSummary {
                final_ratio: self.vault.collateral_ratio(),
                insolvent: self.vault.insolvent,
                ..self.vault_stats.clone()
            },
            breaches: self.breaches.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        let b = ScenarioConfig::baseline();
        assert_eq!(b.chains.count, b.pools.len());
        assert_eq!(b.shocks, vec![Shock { block: 100, multiplier: 0.95 }]);
        ScenarioConfig::manipulation();
    }

    #[test]
    fn low_minimum_ratio_is_rejected_with_its_line() {
        let src = BASELINE.replace("c_min = 1.2", "c_min = 0.9");
        let err = ScenarioConfig::from_toml_str(&src).unwrap_err();
        let line = src.lines().position(|l| l.trim_start().starts_with("c_min")).unwrap() + 1;
        match err {
            ScenarioError::Invalid { line: Some(l), field, .. } => {
                assert_eq!(l, line);
                assert_eq!(field, "vault.params.c_min");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = BASELINE.replace("[market]", "[market]\nvolatility = 3.0");
        match ScenarioConfig::from_toml_str(&src).unwrap_err() {
            ScenarioError::Parse { line, message, .. } => {
                assert!(message.contains("volatility"), "{message}");
                assert!(line > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn anchors_array_tables() {
        let src = "[[pools]]\nfee_bps = 0\n[[pools]]\nfee_bps = 5\n";
        assert_eq!(anchor(src, "pools[1].fee_bps"), Some(4));
        assert_eq!(anchor(src, "pools[0].fee_bps"), Some(2));
    }

    #[test]
    fn flow_reaches_its_target() {
        let mut pool = Pool::new(1e6, 5e5, 0, 0).unwrap();
        for target in [0.52, 0.49] {
            let (dir, x) = flow_toward(&pool, target).unwrap();
            pool.execute(dir, &x).unwrap();
            assert!((pool.spot_price() - target).abs() < 1e-12);
        }
        assert!(flow_toward(&pool, pool.spot_price()).is_none());
    }
}
