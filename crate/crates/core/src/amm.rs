//! Constant-product pools `A · B = L²`.
//!
//! `A` is the stable asset, `B` the collateral. The spot price of the stable
//! is `B / A` (collateral per stable). Buying stable with `Δb` collateral
//! returns `Δa = A·Δb / (B + Δb)`; the effective price is
//! `p_e = Δb / Δa = (B + Δb) / A`, so the price impact is `p_e − p_s = Δb/A`.
//!
//! Pools are generic over [`PoolNum`] so the same code runs in `f64` for
//! simulation and in exact rationals for oracle tests.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BPS: u32 = 10_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AmmError {
    #[error("trade amount must be positive")]
    NonPositiveAmount,
    #[error("reserves must be positive")]
    NonPositiveReserve,
    #[error("trade would empty the pool")]
    WouldEmptyPool,
    #[error("fee of {0} bps is out of range")]
    InvalidFee(u32),
}

/// Arithmetic used by pools.
pub trait PoolNum: Clone + PartialOrd + Debug {
    fn zero() -> Self;
    fn from_f64(v: f64) -> Self;
    fn from_u32(v: u32) -> Self;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn to_f64(&self) -> f64;
    fn is_positive(&self) -> bool {
        *self > Self::zero()
    }
}

impl PoolNum for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_u32(v: u32) -> Self {
        v as f64
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl PoolNum for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn from_f64(v: f64) -> Self {
        BigRational::from_float(v).expect("finite value")
    }
    fn from_u32(v: u32) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn is_positive(&self) -> bool {
        Signed::is_positive(self)
    }
}

/// Which token is paid into the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Pay collateral `B`, receive stable `A`.
    BuyStable,
    /// Pay stable `A`, receive collateral `B`.
    SellStable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool<N: PoolNum = f64> {
    pub reserve_a: N,
    pub reserve_b: N,
    pub fee_bps: u32,
    pub chain_id: u32,
}

/// One executed trade, as recorded in simulation traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub chain_id: u32,
    pub direction: Direction,
    pub amount_in: f64,
    pub amount_out: f64,
    /// Reserve of the token paid in, before the trade.
    pub depth_in: f64,
    /// Spot price before the trade, quoted in the input token per output token.
    pub spot_before: f64,
    /// `amount_in / amount_out`.
    pub effective_price: f64,
    pub fee_bps: u32,
}

impl TradeRecord {
    /// Absolute impact `p_e − p_s` in input-token units.
    pub fn price_impact(&self) -> f64 {
        self.effective_price - self.spot_before
    }

    /// Impact relative to the spot price.
    pub fn relative_impact(&self) -> f64 {
        self.effective_price / self.spot_before - 1.0
    }
}

impl<N: PoolNum> Pool<N> {
    pub fn new(reserve_a: N, reserve_b: N, fee_bps: u32, chain_id: u32) -> Result<Self, AmmError> {
        if !reserve_a.is_positive() || !reserve_b.is_positive() {
            return Err(AmmError::NonPositiveReserve);
        }
        if fee_bps >= BPS {
            return Err(AmmError::InvalidFee(fee_bps));
        }
        Ok(Pool { reserve_a, reserve_b, fee_bps, chain_id })
    }

    /// `L² = A · B`.
    pub fn invariant(&self) -> N {
        self.reserve_a.mul(&self.reserve_b)
    }

    /// `p_s = B / A`.
    pub fn spot_price(&self) -> N {
        self.reserve_b.div(&self.reserve_a)
    }

    fn reserves(&self, dir: Direction) -> (&N, &N) {
        match dir {
            Direction::BuyStable => (&self.reserve_b, &self.reserve_a),
            Direction::SellStable => (&self.reserve_a, &self.reserve_b),
        }
    }

    fn after_fee(&self, amount: &N) -> N {
        if self.fee_bps == 0 {
            return amount.clone();
        }
        amount.mul(&N::from_u32(BPS - self.fee_bps)).div(&N::from_u32(BPS))
    }

    /// Output for `amount_in` paid in direction `dir`:
    /// `out = R_out · x / (R_in + x)` with `x` the post-fee input.
    pub fn quote(&self, dir: Direction, amount_in: &N) -> Result<N, AmmError> {
        if !amount_in.is_positive() {
            return Err(AmmError::NonPositiveAmount);
        }
        let (r_in, r_out) = self.reserves(dir);
        let x = self.after_fee(amount_in);
        let out = r_out.mul(&x).div(&r_in.add(&x));
        if !(r_out.sub(&out)).is_positive() {
            return Err(AmmError::WouldEmptyPool);
        }
        Ok(out)
    }

    /// `Δa = A·Δb / (B + Δb)` for collateral paid in.
    pub fn quote_out(&self, delta_b: &N) -> Result<N, AmmError> {
        self.quote(Direction::BuyStable, delta_b)
    }

    /// Collateral needed to receive exactly `Δa`: `Δb = Δa·B / (A − Δa)`
    /// (fee-free form).
    pub fn quote_in_for_out(&self, delta_a: &N) -> Result<N, AmmError> {
        if !delta_a.is_positive() {
            return Err(AmmError::NonPositiveAmount);
        }
        let remaining = self.reserve_a.sub(delta_a);
        if !remaining.is_positive() {
            return Err(AmmError::WouldEmptyPool);
        }
        Ok(delta_a.mul(&self.reserve_b).div(&remaining))
    }

    /// `PI = Δb / A`.
    pub fn price_impact(&self, delta_b: &N) -> Result<N, AmmError> {
        if !delta_b.is_positive() {
            return Err(AmmError::NonPositiveAmount);
        }
        Ok(delta_b.div(&self.reserve_a))
    }

    /// Executes a trade, keeping the whole input (fee included) in reserves.
    pub fn execute(&mut self, dir: Direction, amount_in: &N) -> Result<(N, TradeRecord), AmmError> {
        let out = self.quote(dir, amount_in)?;
        let (depth_in, spot_before) = {
            let (r_in, r_out) = self.reserves(dir);
            (r_in.to_f64(), r_in.to_f64() / r_out.to_f64())
        };
        match dir {
            Direction::BuyStable => {
                self.reserve_b = self.reserve_b.add(amount_in);
                self.reserve_a = self.reserve_a.sub(&out);
            }
            Direction::SellStable => {
                self.reserve_a = self.reserve_a.add(amount_in);
                self.reserve_b = self.reserve_b.sub(&out);
            }
        }
        let record = TradeRecord {
            chain_id: self.chain_id,
            direction: dir,
            amount_in: amount_in.to_f64(),
            amount_out: out.to_f64(),
            depth_in,
            spot_before,
            effective_price: amount_in.to_f64() / out.to_f64(),
            fee_bps: self.fee_bps,
        };
        Ok((out, record))
    }

    /// Buys stable with `Δb` collateral and returns `Δa`.
    pub fn execute_swap(&mut self, delta_b: &N) -> Result<(N, TradeRecord), AmmError> {
        self.execute(Direction::BuyStable, delta_b)
    }

    /// Scales both reserves by `factor` (adding or withdrawing liquidity at
    /// the current price). Factors at or below zero are rejected.
    pub fn scale_liquidity(&mut self, factor: &N) -> Result<(), AmmError> {
        if !factor.is_positive() {
            return Err(AmmError::NonPositiveReserve);
        }
        self.reserve_a = self.reserve_a.mul(factor);
        self.reserve_b = self.reserve_b.mul(factor);
        Ok(())
    }
}

impl Pool<f64> {
    /// Collateral input that moves the stable's spot price (`B/A`) to
    /// `target`, ignoring fees. Zero if the price is already at or above it.
    pub fn input_to_reach_spot(&self, target: f64) -> f64 {
        // After paying x: (B + x)² / L² = target  =>  x = sqrt(target·L²) − B.
        let x = (target * self.invariant()).sqrt() - self.reserve_b;
        x.max(0.0)
    }

    /// Stable input that moves `B/A` down to `target`.
    pub fn stable_input_to_reach_spot(&self, target: f64) -> f64 {
        let x = (self.invariant() / target).sqrt() - self.reserve_a;
        x.max(0.0)
    }
}
