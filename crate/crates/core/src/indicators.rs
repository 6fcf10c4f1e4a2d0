//! Dual Thrust breakout lines, the demonstration policy built on them, and the
//! hindsight intra-day expert used for behavior cloning labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{Bar, PriceSeries};
use crate::replay::Episode;
use crate::simulator::{self, Decision, DecisionContext, Policy, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum IndicatorError {
    #[error("empty history")]
    EmptyHistory,
    #[error("invalid dual thrust parameters: {0}")]
    InvalidParams(String),
    #[error("insufficient warm-up data: need at least {required} bars, have {available}")]
    InsufficientData { required: usize, available: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualThrustParams {
    /// Lookback in trading days.
    pub n: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for DualThrustParams {
    fn default() -> Self {
        Self {
            n: 5,
            k1: 0.5,
            k2: 0.5,
        }
    }
}

impl DualThrustParams {
    pub fn validate(&self) -> Result<(), IndicatorError> {
        if self.n < 1 {
            return Err(IndicatorError::InvalidParams("n must be >= 1".into()));
        }
        if !(self.k1 >= 0.0) || !(self.k2 >= 0.0) {
            return Err(IndicatorError::InvalidParams(
                "k1 and k2 must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Extremes of one day's bars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DayAggregate {
    pub highest_high: f64,
    pub lowest_close: f64,
    pub highest_close: f64,
    pub lowest_low: f64,
}

impl DayAggregate {
    pub fn from_bars(bars: &[Bar]) -> Option<Self> {
        let first = bars.first()?;
        let init = DayAggregate {
            highest_high: first.high,
            lowest_close: first.close,
            highest_close: first.close,
            lowest_low: first.low,
        };
        Some(bars[1..].iter().fold(init, |acc, b| DayAggregate {
            highest_high: acc.highest_high.max(b.high),
            lowest_close: acc.lowest_close.min(b.close),
            highest_close: acc.highest_close.max(b.close),
            lowest_low: acc.lowest_low.min(b.low),
        }))
    }

    fn merge(self, other: DayAggregate) -> DayAggregate {
        DayAggregate {
            highest_high: self.highest_high.max(other.highest_high),
            lowest_close: self.lowest_close.min(other.lowest_close),
            highest_close: self.highest_close.max(other.highest_close),
            lowest_low: self.lowest_low.min(other.lowest_low),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    pub buy_line: f64,
    pub sell_line: f64,
    pub range_val: f64,
}

/// Breakout lines for one day from the aggregates of the preceding days.
pub fn dual_thrust_lines(
    history: &[DayAggregate],
    day_open: f64,
    params: &DualThrustParams,
) -> Result<IndicatorVector, IndicatorError> {
    let pooled = history
        .iter()
        .copied()
        .reduce(DayAggregate::merge)
        .ok_or(IndicatorError::EmptyHistory)?;
    let range_val =
        (pooled.highest_high - pooled.lowest_close).max(pooled.highest_close - pooled.lowest_low);
    Ok(IndicatorVector {
        buy_line: day_open + params.k1 * range_val,
        sell_line: day_open - params.k2 * range_val,
        range_val,
    })
}

/// Aggregates for every complete day of `bars_per_day` bars.
pub fn daily_aggregates(series: &PriceSeries, bars_per_day: usize) -> Vec<DayAggregate> {
    series
        .bars()
        .chunks_exact(bars_per_day)
        .filter_map(DayAggregate::from_bars)
        .collect()
}

/// Lines for every day that has `params.n` full days before it; `None` for warm-up days.
pub fn lines_by_day(
    series: &PriceSeries,
    bars_per_day: usize,
    params: &DualThrustParams,
) -> Vec<Option<IndicatorVector>> {
    let aggregates = daily_aggregates(series, bars_per_day);
    (0..series.num_days(bars_per_day))
        .map(|day| {
            if day < params.n {
                return None;
            }
            let open = series.bar(day * bars_per_day).open;
            dual_thrust_lines(&aggregates[day - params.n..day], open, params).ok()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Long,
    Short,
    Hold,
}

impl Signal {
    /// Position after acting on the signal from `held`.
    pub fn resolve(self, held: i8) -> i8 {
        match self {
            Signal::Long => 1,
            Signal::Short => -1,
            Signal::Hold => held,
        }
    }
}

pub fn dual_thrust_signal(
    current_price: f64,
    lines: &IndicatorVector,
    _held_position: i8,
) -> Signal {
    if current_price > lines.buy_line {
        Signal::Long
    } else if current_price < lines.sell_line {
        Signal::Short
    } else {
        Signal::Hold
    }
}

/// Long at the first minimum open of the day, short at the first maximum.
/// A flat day (same index for both) gets no labels.
pub fn hindsight_expert(day_opens: &[f64]) -> BTreeMap<usize, i8> {
    let mut labels = BTreeMap::new();
    if day_opens.is_empty() {
        return labels;
    }
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &p) in day_opens.iter().enumerate() {
        if p < day_opens[argmin] {
            argmin = i;
        }
        if p > day_opens[argmax] {
            argmax = i;
        }
    }
    if argmin != argmax {
        labels.insert(argmin, 1);
        labels.insert(argmax, -1);
    }
    labels
}

/// The demonstration policy: Dual Thrust on the last completed close.
/// No breach keeps the held position; with nothing held it goes long.
#[derive(Debug, Clone, Default)]
pub struct DualThrustPolicy;

impl Policy for DualThrustPolicy {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision {
        let signal = dual_thrust_signal(ctx.current_price, &ctx.lines, ctx.position);
        let sign = match signal.resolve(ctx.position) {
            0 => 1,
            s => s,
        };
        Decision::from_sign(sign)
    }
}

/// Minimum series length for demonstrations: warm-up days plus one trading day.
pub fn required_bars(params: &DualThrustParams, config: &SimConfig) -> usize {
    simulator::first_start_bar(params, config) + config.bars_per_day
}

/// Runs the Dual Thrust policy through the simulator; one flagged episode per day.
/// Each step's expert label is the demonstrator's own action.
pub fn generate_demonstrations(
    series: &PriceSeries,
    params: &DualThrustParams,
    config: &SimConfig,
) -> Result<Vec<Episode>, IndicatorError> {
    params.validate()?;
    let required = required_bars(params, config);
    if series.len() < required {
        return Err(IndicatorError::InsufficientData {
            required,
            available: series.len(),
        });
    }
    let run = simulator::run_policy(series, &mut DualThrustPolicy, config, params)?;
    Ok(run
        .episodes
        .into_iter()
        .map(|mut ep| {
            ep.is_demo = true;
            for step in &mut ep.steps {
                step.expert = Some(step.sign);
            }
            ep
        })
        .collect())
}
