//! Trace analytics: concentration, peg statistics, the correction-model
//! fit, market-impact auditing, and the per-block trace table.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amm::TradeRecord;

pub const TRACE_HEADER: &str = "block,chain,price,deviation,c_ratio,reserve_a,reserve_b,arb_volume,reward";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shares sum to {0}, expected 1")]
    Unnormalized(f64),
    #[error("share {0} is negative")]
    NegativeShare(f64),
    #[error("need at least {needed} blocks with arbitrage volume, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("regressors are degenerate")]
    Degenerate,
    #[error("trace header is {0:?}")]
    BadHeader(String),
    #[error("trace row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `Σ s_i² · 10,000` on shares summing to 1 within `1e-9`.
pub fn hhi(shares: &[f64]) -> Result<f64, MetricsError> {
    if let Some(&s) = shares.iter().find(|&&s| s < 0.0) {
        return Err(MetricsError::NegativeShare(s));
    }
    let total: f64 = shares.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MetricsError::Unnormalized(total));
    }
    Ok(raw_hhi(shares))
}

/// `Σ s_i² · 10,000` with no normalization check, evaluated on percentage
/// points (`Σ (100·s_i)²`) so decimal shares such as 0.7 square exactly.
pub fn raw_hhi(shares: &[f64]) -> f64 {
    shares.iter().map(|s| (100.0 * s).powi(2)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concentration {
    Competitive,
    Moderate,
    High,
}

pub fn concentration_band(index: f64) -> Concentration {
    if index < 1_500.0 {
        Concentration::Competitive
    } else if index <= 2_500.0 {
        Concentration::Moderate
    } else {
        Concentration::High
    }
}

/// Each chain's share of the stable-side reserves.
pub fn liquidity_shares(stable_reserves: &[f64]) -> Vec<f64> {
    let total: f64 = stable_reserves.iter().sum();
    stable_reserves.iter().map(|r| r / total).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PegStats {
    pub max_abs_deviation: f64,
    pub blocks_above_band: u64,
    /// Blocks for the post-shock envelope to halve, from a log-linear fit.
    pub half_life: Option<f64>,
}

/// Statistics of a per-block deviation series. `shocks` are indices into
/// `deviations`; the half-life uses the first one.
pub fn peg_stats(deviations: &[f64], shocks: &[usize], band: f64) -> PegStats {
    let max_abs_deviation = deviations.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let blocks_above_band = deviations.iter().filter(|d| d.abs() > band).count() as u64;
    let half_life = shocks.first().and_then(|&s| shock_half_life(deviations, s, band));
    PegStats { max_abs_deviation, blocks_above_band, half_life }
}

/// Fits `ln|Δ_t| = a − k·t` from the shock until the series first returns
/// inside `band` (inclusive) and reports `ln 2 / k`.
fn shock_half_life(deviations: &[f64], shock: usize, band: f64) -> Option<f64> {
    let mut pts = Vec::new();
    for (t, d) in deviations.iter().enumerate().skip(shock) {
        if d.abs() > 0.0 {
            pts.push(((t - shock) as f64, d.abs().ln()));
        }
        if d.abs() <= band {
            break;
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let k = -sxy / sxx;
    (k > 0.0).then(|| std::f64::consts::LN_2 / k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub shock_block: usize,
    /// Blocks from the shock until `|Δ|` is back inside the band for good.
    pub reentry_after: Option<usize>,
    /// Rolling five-block maxima never rise between shock and re-entry.
    pub envelope_monotone: bool,
    pub recovered: bool,
}

/// Re-entry is the first index from which `|Δ| ≤ band` holds until the
/// next shock or the end of the series.
pub fn recovery_check(deviations: &[f64], shocks: &[usize], shock: usize, band: f64, window: usize) -> RecoveryReport {
    let end = shocks.iter().copied().filter(|&s| s > shock).min().unwrap_or(deviations.len());
    let seg = &deviations[shock..end];
    let mut reentry = None;
    for r in (0..seg.len()).rev() {
        if seg[r].abs() > band {
            break;
        }
        reentry = Some(r);
    }
    let width = 5;
    let last = reentry.unwrap_or(seg.len().saturating_sub(1));
    let envelope: Vec<f64> = (0..=last)
        .map(|t| seg[t..(t + width).min(last + 1)].iter().fold(0.0f64, |m, d| m.max(d.abs())))
        .collect();
    let envelope_monotone = envelope.windows(2).all(|w| w[1] <= w[0]);
    let recovered = envelope_monotone && reentry.is_some_and(|r| r <= window);
    RecoveryReport { shock_block: shock, reentry_after: reentry, envelope_monotone, recovered }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionFit {
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
    pub samples: usize,
}

/// Least squares for `Δ_t − Δ_{t−1} = −α·Δ_{t−1} + β·V_t`. Transitions into
/// the indices in `exclude` (exogenous shocks) are left out.
pub fn fit_correction_model(deviations: &[f64], volumes: &[f64], exclude: &[usize]) -> Result<CorrectionFit, MetricsError> {
    assert_eq!(deviations.len(), volumes.len());
    let rows: Vec<usize> = (1..deviations.len()).filter(|t| !exclude.contains(t)).collect();
    let active = rows.iter().filter(|&&t| volumes[t] != 0.0).count();
    if active < 20 {
        return Err(MetricsError::TooFewSamples { needed: 20, found: active });
    }
    let x = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { deviations[rows[i] - 1] } else { volumes[rows[i]] });
    let y = DVector::from_fn(rows.len(), |i, _| deviations[rows[i]] - deviations[rows[i] - 1]);
    // Scale columns so the normal equations are well conditioned.
    let scales: Vec<f64> = (0..2).map(|j| x.column(j).amax()).collect();
    if scales.iter().any(|&s| s == 0.0) {
        return Err(MetricsError::Degenerate);
    }
    let xs = DMatrix::from_fn(rows.len(), 2, |i, j| x[(i, j)] / scales[j]);
    let svd = xs.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(MetricsError::Degenerate);
    }
    let coef = svd.solve(&y, 1e-14).map_err(|_| MetricsError::Degenerate)?;
    let (alpha, beta) = (-coef[0] / scales[0], coef[1] / scales[1]);
    let resid = &y - &xs * &coef;
    let mean = y.mean();
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - resid.norm_squared() / tss } else { 0.0 };
    Ok(CorrectionFit { alpha, beta, r_squared, samples: rows.len() })
}

/// `(δ/L)·(1 + sqrt(ln(1/ε) / (2L)))`.
pub fn impact_bound(size: f64, depth: f64, eps: f64) -> f64 {
    (size / depth) * (1.0 + ((1.0 / eps).ln() / (2.0 * depth)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactAudit {
    pub trades: usize,
    /// Indices of trades whose measured impact exceeds the bound.
    pub violations: Vec<usize>,
    pub fraction: f64,
}

/// Measured impact is `p_e − p_s` in input per output; size is the amount
/// paid in and depth the output-side reserve before the trade.
pub fn audit_impact_bound(trades: &[TradeRecord], eps: f64) -> ImpactAudit {
    let violations: Vec<usize> = trades
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            let depth = t.depth_in / t.spot_before;
            t.price_impact() > impact_bound(t.amount_in, depth, eps) * (1.0 + 1e-12)
        })
        .map(|(i, _)| i)
        .collect();
    let fraction = if trades.is_empty() { 0.0 } else { violations.len() as f64 / trades.len() as f64 };
    ImpactAudit { trades: trades.len(), violations, fraction }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub block: u64,
    pub chain: u32,
    pub price: f64,
    pub deviation: f64,
    pub c_ratio: f64,
    pub reserve_a: f64,
    pub reserve_b: f64,
    pub arb_volume: f64,
    pub reward: f64,
}

/// Per-block records plus the aggregate series the analytics run on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTrace {
    pub chains: u32,
    pub rows: Vec<TraceRow>,
    /// Aggregate deviation per block, block `b` at index `b − 1`.
    pub deviations: Vec<f64>,
    /// Signed stable volume bought by agents per block.
    pub arb_volumes: Vec<f64>,
    pub trades: Vec<TradeRecord>,
    /// Blocks with an exogenous price shock.
    pub shocks: Vec<u64>,
}

impl ScenarioTrace {
    pub fn shock_indices(&self) -> Vec<usize> {
        self.shocks.iter().filter(|&&b| b >= 1).map(|&b| (b - 1) as usize).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, MetricsError> {
        let mut out = Vec::new();
        write_trace_csv(&self.rows, &mut out)?;
        Ok(out)
    }
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<(), MetricsError> {
    let mut writer = csv::Writer::from_writer(w);
    for r in rows {
        writer.serialize(r)?;
    }
    if rows.is_empty() {
        writer.write_record(TRACE_HEADER.split(','))?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parses a trace table and checks it against the fixed schema: exact
/// header, finite values, positive prices and reserves, and one row per
/// chain for every block in increasing order.
pub fn read_trace_csv<R: Read>(r: R, chains: u32) -> Result<Vec<TraceRow>, MetricsError> {
    let mut reader = csv::Reader::from_reader(r);
    let header = reader.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != TRACE_HEADER {
        return Err(MetricsError::BadHeader(header));
    }
    let rows = reader.deserialize().collect::<Result<Vec<TraceRow>, _>>()?;
    validate_trace(&rows, chains)?;
    Ok(rows)
}

pub fn validate_trace(rows: &[TraceRow], chains: u32) -> Result<(), MetricsError> {
    let bad = |row: usize, reason: &str| MetricsError::BadRow { row, reason: reason.to_string() };
    if chains == 0 || rows.len() % chains as usize != 0 {
        return Err(bad(rows.len(), "row count is not a multiple of the chain count"));
    }
    let mut prev_block = None;
    for (i, r) in rows.iter().enumerate() {
        let values = [r.price, r.deviation, r.reserve_a, r.reserve_b, r.arb_volume, r.reward];
        if values.iter().any(|v| !v.is_finite()) || r.c_ratio.is_nan() {
            return Err(bad(i, "non-finite value"));
        }
        if r.price <= 0.0 || r.reserve_a <= 0.0 || r.reserve_b <= 0.0 {
            return Err(bad(i, "non-positive price or reserve"));
        }
        if r.chain != (i % chains as usize) as u32 {
            return Err(bad(i, "chains out of order"));
        }
        if r.chain == 0 {
            if let Some(p) = prev_block {
                if r.block != p + 1 {
                    return Err(bad(i, "block index not consecutive"));
                }
            }
            prev_block = Some(r.block);
        } else if Some(r.block) != prev_block {
            return Err(bad(i, "block index changes within a block"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hhi_values() {
        assert_eq!(hhi(&[1.0]).unwrap(), 10_000.0);
        assert!((hhi(&[0.7, 0.3]).unwrap() - 5_800.0).abs() < 1e-9);
        assert!((hhi(&[0.4, 0.3, 0.3]).unwrap() - 3_400.0).abs() < 1e-9);
        assert!(matches!(hhi(&[0.2; 6]), Err(MetricsError::Unnormalized(_))));
        assert_eq!(concentration_band(1_499.0), Concentration::Competitive);
        assert_eq!(concentration_band(2_400.0), Concentration::Moderate);
        assert_eq!(concentration_band(3_400.0), Concentration::High);
    }

    #[test]
    fn flat_series_stats() {
        let s = peg_stats(&[0.0; 20], &[], 0.005);
        assert_eq!((s.max_abs_deviation, s.blocks_above_band, s.half_life), (0.0, 0, None));
    }

    #[test]
    fn exponential_decay_half_life() {
        let d: Vec<f64> = (0..80).map(|t| 0.05 * 0.9f64.powi(t)).collect();
        let s = peg_stats(&d, &[0], 0.005);
        let expected = 2f64.ln() / (1.0 / 0.9f64).ln();
        assert!((s.half_life.unwrap() - expected).abs() < 1e-9);
        assert!((expected - 6.58).abs() < 0.01);
    }

    #[test]
    fn impact_hand_case() {
        let b = impact_bound(10.0, 100.0, 0.01);
        assert!((b - 0.1 * (1.0 + (100f64.ln() / 200.0).sqrt())).abs() < 1e-15);
        assert!((b - 0.1152).abs() < 1e-4);
        assert!(audit_impact_bound(&[], 0.01).violations.is_empty());
    }

    #[test]
    fn empty_trace_writes_the_header() {
        let mut out = Vec::new();
        write_trace_csv(&[], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().trim_end(), TRACE_HEADER);
    }
}
