//! Stabilization vault: collateral accounting, damped minting, the SFC
//! payoff, threshold classification, L1-regularized rebalancing and partial
//! liquidation, plus the solvency game.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amm::{Direction, Pool, TradeRecord};
use crate::optim::{lasso, L1Solution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaultParams {
    pub c_min: f64,
    pub c_warn: f64,
    /// Minting responsiveness.
    pub alpha: f64,
    /// Volatility damping.
    pub gamma: f64,
    /// Payoff cap in units of volatility.
    pub beta: f64,
    pub peg: f64,
    /// Ratio that partial liquidation restores.
    pub recovery_floor: f64,
    pub rebalance_lambda: f64,
    pub vol_window: usize,
}

impl Default for VaultParams {
    fn default() -> Self {
        VaultParams {
            c_min: 1.2,
            c_warn: 1.3,
            alpha: 0.5,
            gamma: 2.0,
            beta: 1.0,
            peg: 1.0,
            recovery_floor: 1.25,
            rebalance_lambda: 0.7,
            vol_window: 30,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VaultError {
    #[error("locked value must be positive")]
    NonPositiveValue,
    #[error("mint would leave the collateral ratio at {0:.6}, below the minimum")]
    SolvencyGate(f64),
    #[error("minting is halted: vault is insolvent")]
    MintingHalted,
    #[error("minted quantity {0} is not positive")]
    NonPositiveMint(f64),
    #[error("not enough collateral or liabilities to redeem")]
    InsufficientCollateral,
    #[error("unknown collateral position {0}")]
    UnknownPosition(usize),
    #[error("no price for asset {0}")]
    MissingPrice(String),
    #[error("claimed deviation {claimed} differs from observed {observed}")]
    DeviationMismatch { claimed: f64, observed: f64 },
    #[error("vault is not in the liquidation band (ratio {0:.6})")]
    NotInLiquidation(f64),
    #[error("jacobian is {rows}x{cols} but the target has {target} entries")]
    DimensionMismatch { rows: usize, cols: usize, target: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollateralPosition {
    pub asset: String,
    pub chain: u32,
    pub quantity: f64,
}

/// An outstanding SFC issuance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sfc {
    pub quantity: f64,
    pub mint_block: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VaultHealth {
    Healthy,
    Warning,
    Liquidation,
}

/// `Healthy` iff `c ≥ c_warn`, `Warning` iff `c_min ≤ c < c_warn`,
/// `Liquidation` otherwise (including NaN).
pub fn classify_ratio(c: f64, c_min: f64, c_warn: f64) -> VaultHealth {
    if c >= c_warn {
        VaultHealth::Healthy
    } else if c >= c_min {
        VaultHealth::Warning
    } else {
        VaultHealth::Liquidation
    }
}

/// Classification under the default 1.2 / 1.3 thresholds.
pub fn classify_state(c: f64) -> VaultHealth {
    let p = VaultParams::default();
    classify_ratio(c, p.c_min, p.c_warn)
}

/// Boost factor `αΔ / (1 + γσ²)`.
pub fn mint_boost(alpha: f64, gamma: f64, deviation: f64, sigma: f64) -> f64 {
    alpha * deviation / (1.0 + gamma * sigma * sigma)
}

/// `Q = (V / P_peg)·(1 + αΔ/(1 + γσ²))`.
pub fn mint_quantity(value: f64, peg: f64, alpha: f64, gamma: f64, deviation: f64, sigma: f64) -> f64 {
    (value / peg) * (1.0 + mint_boost(alpha, gamma, deviation, sigma))
}

/// `Φ = sgn(P_peg − P)·min(α|P − P_peg|, βσ)`.
pub fn sfc_payoff(price: f64, peg: f64, sigma: f64, alpha: f64, beta: f64) -> f64 {
    let gap = peg - price;
    if gap == 0.0 {
        return 0.0;
    }
    gap.signum() * (alpha * gap.abs()).min(beta * sigma)
}

/// Sample standard deviation of log-returns over a rolling window of prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityWindow {
    window: usize,
    prices: VecDeque<f64>,
}

impl VolatilityWindow {
    pub fn new(window: usize) -> Self {
        assert!(window >= 2, "window needs at least two prices");
        VolatilityWindow { window, prices: VecDeque::with_capacity(window + 1) }
    }

    pub fn push(&mut self, price: f64) {
        self.prices.push_back(price);
        // `window` returns need `window + 1` prices.
        while self.prices.len() > self.window + 1 {
            self.prices.pop_front();
        }
    }

    /// Zero until two returns are available.
    pub fn sigma(&self) -> f64 {
        let returns: Vec<f64> = self
            .prices
            .iter()
            .zip(self.prices.iter().skip(1))
            .map(|(a, b)| (b / a).ln())
            .collect();
        if returns.len() < 2 {
            return 0.0;
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }
}

/// A collateral deposit backing a mint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deposit {
    pub position: usize,
    pub quantity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaultState {
    pub positions: Vec<CollateralPosition>,
    pub liabilities: Vec<Sfc>,
    /// Price feed the vault acts on, per asset.
    pub prices: BTreeMap<String, f64>,
    pub params: VaultParams,
    pub insolvent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RebalanceOutcome {
    /// Collateral sold per position.
    pub sold: Vec<f64>,
    pub burned: f64,
    pub trades: Vec<TradeRecord>,
    pub ratio_before: f64,
    pub ratio_after: f64,
    pub rounds: usize,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiquidationOutcome {
    /// Liabilities burned.
    pub closed: f64,
    pub trades: Vec<TradeRecord>,
    pub ratio_before: f64,
    pub ratio_after: f64,
    pub insolvent: bool,
}

impl VaultState {
    pub fn new(positions: Vec<CollateralPosition>, prices: BTreeMap<String, f64>, params: VaultParams) -> Self {
        VaultState { positions, liabilities: Vec::new(), prices, params, insolvent: false }
    }

    pub fn price_of(&self, asset: &str) -> Result<f64, VaultError> {
        self.prices.get(asset).copied().ok_or_else(|| VaultError::MissingPrice(asset.to_string()))
    }

    /// `Σ V_i·P_i` at the vault's prices.
    pub fn collateral_value(&self) -> f64 {
        self.positions.iter().map(|p| p.quantity * self.prices.get(&p.asset).copied().unwrap_or(0.0)).sum()
    }

    pub fn total_liabilities(&self) -> f64 {
        self.liabilities.iter().map(|l| l.quantity).sum()
    }

    /// `Σ V_i·P_i / Σ Q_j·P_peg`; `+∞` with no liabilities.
    pub fn collateral_ratio(&self) -> f64 {
        let d = self.total_liabilities() * self.params.peg;
        if d <= 0.0 {
            return f64::INFINITY;
        }
        self.collateral_value() / d
    }

    /// Ratio valued at `prices` instead of the vault's own feed.
    pub fn ratio_at(&self, prices: &BTreeMap<String, f64>) -> f64 {
        let d = self.total_liabilities() * self.params.peg;
        if d <= 0.0 {
            return f64::INFINITY;
        }
        let v: f64 = self.positions.iter().map(|p| p.quantity * prices.get(&p.asset).copied().unwrap_or(0.0)).sum();
        v / d
    }

    pub fn health(&self) -> VaultHealth {
        classify_ratio(self.collateral_ratio(), self.params.c_min, self.params.c_warn)
    }

    /// Issues liabilities against a deposit. Rejected when the vault is
    /// insolvent or the post-mint ratio would fall below `c_min`.
    pub fn mint_sfc(&mut self, deposit: Deposit, deviation: f64, sigma: f64, block: u64) -> Result<f64, VaultError> {
        if self.insolvent {
            return Err(VaultError::MintingHalted);
        }
        let pos = self.positions.get(deposit.position).ok_or(VaultError::UnknownPosition(deposit.position))?;
        let value = deposit.quantity * self.price_of(&pos.asset)?;
        if !(value > 0.0) {
            return Err(VaultError::NonPositiveValue);
        }
        let p = self.params;
        let q = mint_quantity(value, p.peg, p.alpha, p.gamma, deviation, sigma);
        if !(q > 0.0) {
            return Err(VaultError::NonPositiveMint(q));
        }
        let after = (self.collateral_value() + value) / ((self.total_liabilities() + q) * p.peg);
        if after < p.c_min {
            return Err(VaultError::SolvencyGate(after));
        }
        self.positions[deposit.position].quantity += deposit.quantity;
        self.liabilities.push(Sfc { quantity: q, mint_block: block });
        Ok(q)
    }

    /// Burns `amount` of liabilities and pays out collateral from `position`
    /// worth `amount·P_peg` at the vault's prices. Returns the quantity paid.
    pub fn redeem(&mut self, amount: f64, position: usize) -> Result<f64, VaultError> {
        let pos = self.positions.get(position).ok_or(VaultError::UnknownPosition(position))?;
        if !(amount > 0.0) {
            return Err(VaultError::NonPositiveValue);
        }
        let qty = amount * self.params.peg / self.price_of(&pos.asset)?;
        if qty > pos.quantity || amount > self.total_liabilities() {
            return Err(VaultError::InsufficientCollateral);
        }
        self.positions[position].quantity -= qty;
        self.burn(amount);
        Ok(qty)
    }

    /// Removes `amount` of liabilities pro rata across instruments.
    pub fn burn(&mut self, amount: f64) {
        let total = self.total_liabilities();
        if total <= 0.0 || amount <= 0.0 {
            return;
        }
        let keep = ((total - amount) / total).max(0.0);
        for l in &mut self.liabilities {
            l.quantity *= keep;
        }
    }

    /// Ratio after selling `sold[k]` of each position into its chain's pool
    /// and burning the stable received. Pools are not modified.
    fn ratio_after_sales(&self, pools: &[Pool], sold: &[f64]) -> f64 {
        let mut pools = pools.to_vec();
        let mut v = self.collateral_value();
        let mut d = self.total_liabilities();
        for (k, &x) in sold.iter().enumerate() {
            if x <= 0.0 {
                continue;
            }
            let pos = &self.positions[k];
            let price = self.prices.get(&pos.asset).copied().unwrap_or(0.0);
            let Ok((out, _)) = pools[pos.chain as usize].execute(Direction::BuyStable, &x) else {
                return f64::NEG_INFINITY;
            };
            v -= x * price;
            d -= out;
        }
        if d <= 0.0 {
            return f64::INFINITY;
        }
        v / (d * self.params.peg)
    }

    fn execute_sales(&mut self, pools: &mut [Pool], sold: &[f64]) -> (f64, Vec<TradeRecord>) {
        let mut burned = 0.0;
        let mut trades = Vec::new();
        for (k, &x) in sold.iter().enumerate() {
            if x <= 0.0 {
                continue;
            }
            let chain = self.positions[k].chain as usize;
            if let Ok((out, rec)) = pools[chain].execute(Direction::BuyStable, &x) {
                self.positions[k].quantity -= x;
                burned += out;
                trades.push(rec);
            }
        }
        self.burn(burned);
        (burned, trades)
    }

    /// Target and finite-difference Jacobian for one rebalancing round, in
    /// basis points of ratio per percent of each position sold.
    ///
    /// Rows are the per-asset contributions `c_m = V_m·P_m / D` to the ratio;
    /// the target splits the required change in proportion to each
    /// contribution, so matching it keeps the collateral mix.
    pub fn rebalance_problem(&self, pools: &[Pool], target_ratio: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.positions.len();
        let d = self.total_liabilities() * self.params.peg;
        let c = self.collateral_ratio();
        let contributions: Vec<f64> = self
            .positions
            .iter()
            .map(|p| p.quantity * self.prices.get(&p.asset).copied().unwrap_or(0.0) / d)
            .collect();
        let gap_bp = 1e4 * (target_ratio - c);
        let target = DVector::from_iterator(n, contributions.iter().map(|cm| gap_bp * cm / c));
        let mut jac = DMatrix::zeros(n, n);
        for k in 0..n {
            let pos = &self.positions[k];
            // One basis point of the position, in percent units below.
            let h = pos.quantity * 1e-4;
            if h <= 0.0 {
                continue;
            }
            let Ok(out) = pools[pos.chain as usize].quote(Direction::BuyStable, &h) else { continue };
            let d_new = d - out * self.params.peg;
            for m in 0..n {
                let pm = &self.positions[m];
                let vm = pm.quantity - if m == k { h } else { 0.0 };
                let new_cm = vm * self.prices.get(&pm.asset).copied().unwrap_or(0.0) / d_new;
                jac[(m, k)] = 1e4 * (new_cm - contributions[m]) / 0.01;
            }
        }
        (target, jac)
    }

    /// Warning-band response: repeatedly solves the L1 problem and sells
    /// the implied collateral for stable to burn, until the ratio reaches
    /// `c_warn` or a round stops improving it.
    pub fn rebalance_with_pools(&mut self, pools: &mut [Pool]) -> RebalanceOutcome {
        let before = self.collateral_ratio();
        let target_ratio = self.params.c_warn;
        let mut sold_total = vec![0.0; self.positions.len()];
        let mut trades = Vec::new();
        let mut burned = 0.0;
        let mut diagnostic = None;
        let mut rounds = 0;
        for _ in 0..25 {
            let c = self.collateral_ratio();
            if c >= target_ratio {
                break;
            }
            rounds += 1;
            let (target, jac) = self.rebalance_problem(pools, target_ratio);
            let sol = match rebalance(&target, &jac, self.params.rebalance_lambda) {
                Ok(s) => s,
                Err(e) => {
                    diagnostic = Some(e.to_string());
                    break;
                }
            };
            let mut sold: Vec<f64> = sol
                .x
                .iter()
                .zip(&self.positions)
                .map(|(pct, p)| (pct / 100.0).clamp(0.0, 0.99) * p.quantity)
                .collect();
            if sold.iter().all(|&x| x <= 0.0) {
                diagnostic = Some("solver returned no trades".into());
                break;
            }
            // Halve the step until it actually helps; pools are nonlinear.
            let mut improved = false;
            for _ in 0..12 {
                if self.ratio_after_sales(pools, &sold) > c {
                    improved = true;
                    break;
                }
                sold.iter_mut().for_each(|x| *x /= 2.0);
            }
            if !improved {
                diagnostic = Some("no improving trade at current pool prices".into());
                break;
            }
            // The ratio is convex in the amount sold, so the linear step can
            // overshoot; scale back to just reach the target.
            if self.ratio_after_sales(pools, &sold) > target_ratio {
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..50 {
                    let mid = (lo + hi) / 2.0;
                    let trial: Vec<f64> = sold.iter().map(|x| x * mid).collect();
                    if self.ratio_after_sales(pools, &trial) >= target_ratio {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                sold.iter_mut().for_each(|x| *x *= hi);
            }
            let (b, t) = self.execute_sales(pools, &sold);
            burned += b;
            trades.extend(t);
            for (acc, x) in sold_total.iter_mut().zip(&sold) {
                *acc += x;
            }
        }
        RebalanceOutcome {
            sold: sold_total,
            burned,
            trades,
            ratio_before: before,
            ratio_after: self.collateral_ratio(),
            rounds,
            diagnostic,
        }
    }

    /// Partial closure: sells collateral for stable to burn, deepest pool
    /// first, until the ratio reaches `recovery_floor`. If no sale can get
    /// there the best reachable ratio is taken and the vault is marked
    /// insolvent, which halts minting.
    pub fn liquidate_partial(&mut self, pools: &mut [Pool]) -> Result<LiquidationOutcome, VaultError> {
        let before = self.collateral_ratio();
        if before >= self.params.c_min {
            return Err(VaultError::NotInLiquidation(before));
        }
        let floor = self.params.recovery_floor;
        let mut order: Vec<usize> = (0..self.positions.len()).collect();
        order.sort_by(|&a, &b| {
            let da = pools[self.positions[a].chain as usize].reserve_a;
            let db = pools[self.positions[b].chain as usize].reserve_a;
            db.partial_cmp(&da).unwrap().then(a.cmp(&b))
        });
        let mut closed = 0.0;
        let mut trades = Vec::new();
        for k in order {
            let c = self.collateral_ratio();
            if c >= floor {
                break;
            }
            let qty = self.positions[k].quantity;
            if qty <= 0.0 {
                continue;
            }
            let n = self.positions.len();
            let ratio_at = |x: f64| {
                let mut sold = vec![0.0; n];
                sold[k] = x;
                self.ratio_after_sales(pools, &sold)
            };
            // Ratio along one position's sale is unimodal; find its peak.
            let (mut lo, mut hi) = (0.0, qty * 0.999_999);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..60 {
                let m1 = hi - phi * (hi - lo);
                let m2 = lo + phi * (hi - lo);
                if ratio_at(m1) < ratio_at(m2) {
                    lo = m1;
                } else {
                    hi = m2;
                }
            }
            let peak = (lo + hi) / 2.0;
            let amount = if ratio_at(peak) >= floor {
                // Smallest sale reaching the floor.
                let (mut a, mut b) = (0.0, peak);
                for _ in 0..80 {
                    let mid = (a + b) / 2.0;
                    if ratio_at(mid) >= floor {
                        b = mid;
                    } else {
                        a = mid;
                    }
                }
                b
            } else if ratio_at(peak) > c {
                peak
            } else {
                continue;
            };
            let mut sold = vec![0.0; n];
            sold[k] = amount;
            let (b, t) = self.execute_sales(pools, &sold);
            closed += b;
            trades.extend(t);
        }
        let after = self.collateral_ratio();
        if after < floor {
            self.insolvent = true;
        }
        Ok(LiquidationOutcome { closed, trades, ratio_before: before, ratio_after: after, insolvent: self.insolvent })
    }
}

/// `argmin_δ ‖target − J·δ‖² + λ‖δ‖₁` by proximal gradient: fixed step
/// `1/(2σ_max(J)²)`, at most 500 iterations, stop when the objective moves
/// by less than `1e-8`.
pub fn rebalance(target: &DVector<f64>, jacobian: &DMatrix<f64>, lambda: f64) -> Result<L1Solution, VaultError> {
    if jacobian.nrows() != target.len() {
        return Err(VaultError::DimensionMismatch {
            rows: jacobian.nrows(),
            cols: jacobian.ncols(),
            target: target.len(),
        });
    }
    Ok(lasso(target, jacobian, lambda, 500, 1e-8))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolvencyAdversary {
    Idle,
    /// Moves the market price of collateral by up to `max_step` per block,
    /// and skews the oracle whenever an error is injected.
    PriceManipulator { max_step: f64 },
    /// Deposits and mints as much as the gate allows, claiming boosted
    /// deviations.
    MintSpammer,
    /// Pushes the price down at the maximum rate to force liquidations.
    LiquidationTrigger { max_step: f64 },
}

impl SolvencyAdversary {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        match rng.gen_range(0..4) {
            0 => SolvencyAdversary::Idle,
            1 => SolvencyAdversary::PriceManipulator { max_step: rng.gen_range(0.005..0.05) },
            2 => SolvencyAdversary::MintSpammer,
            _ => SolvencyAdversary::LiquidationTrigger { max_step: rng.gen_range(0.01..0.05) },
        }
    }

    fn step_bound(&self) -> f64 {
        match self {
            SolvencyAdversary::PriceManipulator { max_step } | SolvencyAdversary::LiquidationTrigger { max_step } => {
                *max_step
            }
            _ => 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolvencyGameConfig {
    pub horizon: u64,
    pub chains: usize,
    /// Largest relative overstatement of collateral when the oracle errs.
    pub oracle_bias: f64,
    /// Blocks after an injected error during which a breach is attributed
    /// to it.
    pub lookback: u64,
    pub rebalancing: bool,
    /// Stable-side pool depth as a multiple of initial liabilities.
    pub pool_depth: f64,
    pub params: VaultParams,
}

impl Default for SolvencyGameConfig {
    fn default() -> Self {
        SolvencyGameConfig {
            horizon: 40,
            chains: 3,
            oracle_bias: 0.3,
            lookback: 2,
            rebalancing: true,
            pool_depth: 20.0,
            params: VaultParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolvencyOutcome {
    pub adversary: SolvencyAdversary,
    pub violation: bool,
    /// Blocks ending below `c_min` at market prices, with whether an oracle
    /// error falls inside the lookback window.
    pub breaches: Vec<(u64, f64, bool)>,
    pub error_blocks: Vec<u64>,
    pub min_ratio: f64,
    pub final_ratio: f64,
    pub mints_accepted: u64,
    pub mints_rejected: u64,
}

/// One seeded solvency game. Each block: the adversary moves the market,
/// the oracle reports (erring with probability `oracle_error_rate`), the
/// adversary's mint requests are processed at oracle prices, the vault
/// maintains itself, and the ratio is checked at market prices.
pub fn solvency_game(
    adversary: SolvencyAdversary,
    oracle_error_rate: f64,
    seed: u64,
    cfg: &SolvencyGameConfig,
) -> SolvencyOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.params;
    let asset = "COL".to_string();
    let mut market = 2.0f64;
    let liabilities = 1_000_000.0;
    let init_value = p.c_warn * liabilities * p.peg;
    let n = cfg.chains;
    let positions = (0..n)
        .map(|k| CollateralPosition { asset: asset.clone(), chain: k as u32, quantity: init_value / market / n as f64 })
        .collect();
    let mut vault = VaultState::new(positions, BTreeMap::from([(asset.clone(), market)]), p);
    vault.liabilities.push(Sfc { quantity: liabilities, mint_block: 0 });
    let depth_a = cfg.pool_depth * liabilities / n as f64;
    let mut pools: Vec<Pool> = (0..n)
        .map(|k| Pool::new(depth_a, depth_a * p.peg / market, 0, k as u32).expect("positive reserves"))
        .collect();

    let mut out = SolvencyOutcome {
        adversary,
        violation: false,
        breaches: Vec::new(),
        error_blocks: Vec::new(),
        min_ratio: vault.collateral_ratio(),
        final_ratio: vault.collateral_ratio(),
        mints_accepted: 0,
        mints_rejected: 0,
    };
    let direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    for block in 1..=cfg.horizon {
        // Market move.
        let step = adversary.step_bound();
        match adversary {
            SolvencyAdversary::Idle => {}
            SolvencyAdversary::PriceManipulator { .. } => {
                let s = if rng.gen_bool(0.7) { -1.0 } else { direction };
                market *= 1.0 + s * rng.gen_range(0.0..=step);
            }
            SolvencyAdversary::MintSpammer => market *= 1.0 + rng.gen_range(-step..=step) * 0.2,
            SolvencyAdversary::LiquidationTrigger { .. } => market *= 1.0 - step,
        }
        // External arbitrage keeps the pools at peg against the market.
        for pool in &mut pools {
            pool.reserve_b = pool.reserve_a * p.peg / market;
        }
        // Oracle.
        let err = oracle_error_rate > 0.0 && rng.gen_bool(oracle_error_rate.min(1.0));
        let oracle = if err {
            out.error_blocks.push(block);
            market * (1.0 + rng.gen_range(0.5..=1.0) * cfg.oracle_bias)
        } else {
            market
        };
        vault.prices.insert(asset.clone(), oracle);
        // Adversary mints.
        if matches!(adversary, SolvencyAdversary::MintSpammer | SolvencyAdversary::PriceManipulator { .. }) {
            let attempts = if adversary == SolvencyAdversary::MintSpammer { 3 } else { 1 };
            for _ in 0..attempts {
                let claimed = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.1) };
                // The vault checks the claimed deviation against what it sees
                // in the pools at oracle prices.
                let observed = pools[0].spot_price() * oracle / p.peg - 1.0;
                if (claimed - observed).abs() > 1e-3 {
                    out.mints_rejected += 1;
                    continue;
                }
                let frac = rng.gen_range(0.01..0.2);
                let qty = frac * vault.total_liabilities() / oracle;
                let position = rng.gen_range(0..n);
                match vault.mint_sfc(Deposit { position, quantity: qty }, observed, 0.0, block) {
                    Ok(_) => out.mints_accepted += 1,
                    Err(_) => out.mints_rejected += 1,
                }
            }
        }
        // Maintenance at oracle prices.
        if cfg.rebalancing {
            match vault.health() {
                VaultHealth::Liquidation => {
                    let _ = vault.liquidate_partial(&mut pools);
                }
                VaultHealth::Warning => {
                    vault.rebalance_with_pools(&mut pools);
                }
                VaultHealth::Healthy => {}
            }
        }
        // Judge at market prices.
        let truth = vault.ratio_at(&BTreeMap::from([(asset.clone(), market)]));
        out.min_ratio = out.min_ratio.min(truth);
        out.final_ratio = truth;
        if truth < p.c_min {
            let flagged = out.error_blocks.iter().any(|&e| e <= block && block - e <= cfg.lookback);
            out.breaches.push((block, truth, flagged));
            if !flagged && cfg.rebalancing {
                out.violation = true;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolvencyReport {
    pub runs: u64,
    pub violations: u64,
    pub flagged_breaches: u64,
    pub error_blocks: u64,
}

pub fn solvency_harness(runs: u64, oracle_error_rate: f64, seed: u64, cfg: &SolvencyGameConfig) -> SolvencyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SolvencyReport::default();
    for _ in 0..runs {
        let adversary = SolvencyAdversary::sample(&mut rng);
        let o = solvency_game(adversary, oracle_error_rate, rng.gen(), cfg);
        report.runs += 1;
        report.violations += o.violation as u64;
        report.flagged_breaches += o.breaches.iter().filter(|b| b.2).count() as u64;
        report.error_blocks += o.error_blocks.len() as u64;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_asset_vault(value: f64, liabilities: f64) -> VaultState {
        let mut v = VaultState::new(
            vec![CollateralPosition { asset: "C".into(), chain: 0, quantity: value }],
            BTreeMap::from([("C".to_string(), 1.0)]),
            VaultParams::default(),
        );
        if liabilities > 0.0 {
            v.liabilities.push(Sfc { quantity: liabilities, mint_block: 0 });
        }
        v
    }

    #[test]
    fn ratio_examples() {
        assert!((one_asset_vault(130.0, 100.0).collateral_ratio() - 1.3).abs() < 1e-15);
        assert_eq!(one_asset_vault(130.0, 0.0).collateral_ratio(), f64::INFINITY);
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify_state(1.3), VaultHealth::Healthy);
        assert_eq!(classify_state(1.2), VaultHealth::Warning);
        assert_eq!(classify_state(1.1999), VaultHealth::Liquidation);
        assert_eq!(classify_state(f64::INFINITY), VaultHealth::Healthy);
        assert_eq!(classify_state(f64::NAN), VaultHealth::Liquidation);
    }

    #[test]
    fn mint_examples() {
        assert_eq!(mint_quantity(1000.0, 1.0, 0.5, 2.0, 0.0, 0.3), 1000.0);
        let q = mint_quantity(1000.0, 1.0, 0.5, 2.0, 0.02, 0.1);
        assert!((q - 1000.0 * (1.0 + 0.01 / 1.02)).abs() < 1e-9);
        assert!((q - 1009.8039).abs() < 1e-4);
        assert!((mint_quantity(1000.0, 1.0, 0.5, 2.0, 0.02, 1e9) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn payoff_examples() {
        assert_eq!(sfc_payoff(1.0, 1.0, 0.1, 1.0, 1.0), 0.0);
        assert!((sfc_payoff(0.98, 1.0, 0.1, 1.0, 10.0) - 0.02).abs() < 1e-12);
        assert!((sfc_payoff(0.5, 1.0, 0.1, 1.0, 1.0) - 0.1).abs() < 1e-12);
        assert!(sfc_payoff(1.05, 1.0, 0.1, 1.0, 1.0) < 0.0);
    }

    #[test]
    fn mint_gate_rejects_undercollateralizing_mints() {
        let mut v = one_asset_vault(130.0, 100.0);
        // 100 more collateral with 100 more liabilities gives 230/200 = 1.15.
        assert!(matches!(
            v.mint_sfc(Deposit { position: 0, quantity: 100.0 }, 0.0, 0.0, 1),
            Err(VaultError::SolvencyGate(_))
        ));
        assert_eq!(v.total_liabilities(), 100.0);
        let q = v.mint_sfc(Deposit { position: 0, quantity: 10.0 }, 0.0, 0.0, 1).unwrap();
        assert_eq!(q, 10.0);
        assert!(v.collateral_ratio() >= 1.2);
        v.insolvent = true;
        assert_eq!(v.mint_sfc(Deposit { position: 0, quantity: 1.0 }, 0.0, 0.0, 2), Err(VaultError::MintingHalted));
    }

    #[test]
    fn volatility_window() {
        let mut w = VolatilityWindow::new(30);
        assert_eq!(w.sigma(), 0.0);
        for _ in 0..40 {
            w.push(1.0);
        }
        assert_eq!(w.sigma(), 0.0);
        let mut w = VolatilityWindow::new(3);
        for p in [1.0, 1.1, 1.0, 1.1, 1.0] {
            w.push(p);
        }
        // Last three returns: -ln1.1, ln1.1, -ln1.1.
        let r = 1.1f64.ln();
        let mean = -r / 3.0;
        let var = ((-r - mean).powi(2) * 2.0 + (r - mean).powi(2)) / 2.0;
        assert!((w.sigma() - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rebalance_zero_target_and_dimension_check() {
        let jac = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.5]);
        assert_eq!(rebalance(&DVector::zeros(2), &jac, 0.7).unwrap().x, DVector::zeros(2));
        assert!(rebalance(&DVector::zeros(3), &jac, 0.7).is_err());
    }

    #[test]
    fn liquidation_requires_the_band() {
        let mut v = one_asset_vault(125.0, 100.0);
        let mut pools = vec![Pool::new(1e6, 1e6, 0, 0).unwrap()];
        assert!(matches!(v.liquidate_partial(&mut pools), Err(VaultError::NotInLiquidation(_))));
    }

    #[test]
    fn idle_adversary_leaves_the_ratio_alone() {
        let o = solvency_game(SolvencyAdversary::Idle, 0.0, 1, &SolvencyGameConfig::default());
        assert!((o.final_ratio - 1.3).abs() < 1e-12);
        assert!(!o.violation && o.breaches.is_empty());
    }
}
