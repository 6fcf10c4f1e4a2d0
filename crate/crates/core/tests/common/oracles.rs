//! Independent reference implementations used as test oracles.

use qtlab::indicators::{DualThrustParams, IndicatorVector};
use qtlab::market_data::Bar;
use qtlab::simulator::SimConfig;

/// O(n^2) maximum drawdown: max over i < j of (P_i - P_j) / P_i, floored at 0.
pub fn brute_drawdown(values: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            worst = worst.max((values[i] - values[j]) / values[i]);
        }
    }
    worst
}

/// Two-pass mean and population standard deviation.
pub fn two_pass(returns: &[f64]) -> (f64, f64) {
    let n = returns.len() as f64;
    let mut sum = 0.0;
    for r in returns {
        sum += r;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for r in returns {
        ss += (r - mean).powi(2);
    }
    (mean, (ss / n).sqrt())
}

/// Dual Thrust lines by scanning every bar of the previous `n` days.
pub fn brute_lines(
    history_bars: &[Bar],
    day_open: f64,
    params: &DualThrustParams,
) -> IndicatorVector {
    let mut hh = f64::MIN;
    let mut lc = f64::MAX;
    let mut hc = f64::MIN;
    let mut ll = f64::MAX;
    for b in history_bars {
        if b.high > hh {
            hh = b.high;
        }
        if b.close < lc {
            lc = b.close;
        }
        if b.close > hc {
            hc = b.close;
        }
        if b.low < ll {
            ll = b.low;
        }
    }
    let range = if hh - lc > hc - ll { hh - lc } else { hc - ll };
    IndicatorVector {
        buy_line: day_open + params.k1 * range,
        sell_line: day_open - params.k2 * range,
        range_val: range,
    }
}

/// Expected equity after every step for positions held over `bars`, computed
/// as close-to-close mark-to-market minus per-fill fees and slippage. Valid
/// when every open equals the previous close and the first bar's previous
/// close is its open.
pub fn conservation_equity(bars: &[Bar], positions: &[i8], cfg: &SimConfig) -> Vec<f64> {
    let m = cfg.contract_multiplier;
    let mut equity = cfg.initial_cash;
    let mut held = 0i8;
    let mut out = Vec::with_capacity(bars.len());
    for (t, (bar, &pos)) in bars.iter().zip(positions).enumerate() {
        let prev_close = if t == 0 { bar.open } else { bars[t - 1].close };
        if pos != held {
            let mut fills = Vec::new();
            if held != 0 {
                fills.push(-held);
            }
            fills.push(pos);
            for side in fills {
                let price = bar.open + f64::from(side) * cfg.slippage;
                equity -= cfg.fee_rate * price * m;
                equity -= cfg.slippage * m;
            }
            held = pos;
        }
        equity += f64::from(pos) * (bar.close - prev_close) * m;
        out.push(equity);
    }
    out
}

/// Labels by scanning for the first minimum and first maximum.
pub fn brute_hindsight(opens: &[f64]) -> Vec<(usize, i8)> {
    if opens.is_empty() {
        return vec![];
    }
    let lo = opens.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = opens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let imin = opens.iter().position(|&p| p == lo).unwrap();
    let imax = opens.iter().position(|&p| p == hi).unwrap();
    if imin == imax {
        return vec![];
    }
    let mut v = vec![(imin, 1), (imax, -1)];
    v.sort();
    v
}
