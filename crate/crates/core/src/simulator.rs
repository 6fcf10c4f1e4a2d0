//! Minute-bar futures trading environment.
//!
//! Orders fill at the bar open, moved adversely by the slippage, and pay a
//! proportional fee per side. The account is marked to market at every close.
//! Episodes are one trading day; the account (cash and position) carries over
//! from one day to the next within a run.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{self, DualThrustParams, IndicatorVector};
use crate::market_data::{PriceSeries, DEFAULT_BARS_PER_DAY};
use crate::replay::{Episode, Step};

/// Floor applied to the rolling standard deviation in the Sharpe reward.
pub const SHARPE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("start bar {start} is not aligned to a day boundary of {bars_per_day} bars")]
    Misaligned { start: usize, bars_per_day: usize },
    #[error("start bar {start} precedes the warm-up requirement of {required} bars")]
    InsufficientWarmup { start: usize, required: usize },
    #[error("series has no trading day after warm-up (needs {required} bars, has {available})")]
    InsufficientData { required: usize, available: usize },
    #[error("step called after the episode is done")]
    EpisodeDone,
    #[error("no further trading day is available")]
    EndOfData,
    #[error("account terminated at bar {0}")]
    Terminated(usize),
    #[error("invalid action sign {0}")]
    InvalidAction(i8),
    #[error("non-finite value in simulator at bar {0}")]
    NonFinite(usize),
    #[error("policy failed: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    /// Rolling Sharpe ratio of per-step return rates.
    Sharpe,
    /// Per-step profit as a percentage of one contract's notional at the previous close.
    Profit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub fee_rate: f64,
    /// Index points per executed fill.
    pub slippage: f64,
    pub initial_cash: f64,
    pub contract_multiplier: f64,
    pub margin_rate: f64,
    pub loss_termination: f64,
    pub reward_window: usize,
    /// Bars in the observed price window.
    pub lookback: usize,
    pub bars_per_day: usize,
    pub reward_kind: RewardKind,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            fee_rate: 2e-5,
            slippage: 0.15,
            initial_cash: 1_000_000.0,
            contract_multiplier: 1.0,
            margin_rate: 0.1,
            loss_termination: 0.5,
            reward_window: 60,
            lookback: 30,
            bars_per_day: DEFAULT_BARS_PER_DAY,
            reward_kind: RewardKind::Sharpe,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.fee_rate >= 0.0) {
            return bad("fee_rate must be >= 0");
        }
        if !(self.slippage >= 0.0) {
            return bad("slippage must be >= 0");
        }
        if !(self.initial_cash > 0.0) {
            return bad("initial_cash must be > 0");
        }
        if !(self.contract_multiplier > 0.0) {
            return bad("contract_multiplier must be > 0");
        }
        if !(self.margin_rate >= 0.0) {
            return bad("margin_rate must be >= 0");
        }
        if !(self.loss_termination > 0.0 && self.loss_termination <= 1.0) {
            return bad("loss_termination must lie in (0, 1]");
        }
        if self.reward_window < 2 {
            return bad("reward_window must be >= 2");
        }
        if self.lookback < 1 {
            return bad("lookback must be >= 1");
        }
        if self.bars_per_day < 1 {
            return bad("bars_per_day must be >= 1");
        }
        Ok(())
    }

    /// Observation length: OHLC window, three indicator values, profit and position.
    pub fn observation_dim(&self) -> usize {
        4 * self.lookback + 3 + 2
    }
}

/// First bar at which an episode may start: a day boundary after both the
/// indicator warm-up and the observation window.
pub fn first_start_bar(params: &DualThrustParams, config: &SimConfig) -> usize {
    let nd = config.bars_per_day.max(1);
    let warm = params.n * nd;
    let need = warm.max(config.lookback);
    need.div_ceil(nd) * nd
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Normalized OHLC window followed by the normalized indicator vector.
    pub market_features: Vec<f64>,
    /// Episode profit over initial cash, and the current position.
    pub portfolio_features: [f64; 2],
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.market_features.len() + 2
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.market_features);
        v.extend_from_slice(&self.portfolio_features);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountState {
    pub cash: f64,
    pub position: i8,
    pub entry_price: f64,
    pub equity: f64,
    pub cumulative_fees: f64,
    pub cumulative_slippage: f64,
}

impl AccountState {
    fn new(cash: f64) -> Self {
        Self {
            cash,
            position: 0,
            entry_price: 0.0,
            equity: cash,
            cumulative_fees: 0.0,
            cumulative_slippage: 0.0,
        }
    }

    fn mark(&mut self, price: f64, multiplier: f64) {
        self.equity = if self.position == 0 {
            self.cash
        } else {
            self.cash + f64::from(self.position) * (price - self.entry_price) * multiplier
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub bar_index: usize,
    pub equity: f64,
    pub position: i8,
    pub fees_paid: f64,
    /// True when done came from the loss or margin rule rather than the day end.
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub account_profit: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Stateful single-instrument environment over a shared series.
#[derive(Debug, Clone)]
pub struct TradingEnv<'a> {
    series: &'a PriceSeries,
    config: SimConfig,
    lines: Vec<Option<IndicatorVector>>,
    account: AccountState,
    /// Index of the next bar to execute.
    cursor: usize,
    episode_start_equity: f64,
    return_history: VecDeque<f64>,
    done: bool,
    terminated: bool,
}

impl<'a> TradingEnv<'a> {
    pub fn new(
        series: &'a PriceSeries,
        config: &SimConfig,
        params: &DualThrustParams,
    ) -> Result<Self, SimError> {
        config.validate()?;
        params
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            series,
            lines: indicators::lines_by_day(series, config.bars_per_day, params),
            config: config.clone(),
            account: AccountState::new(config.initial_cash),
            cursor: 0,
            episode_start_equity: config.initial_cash,
            return_history: VecDeque::with_capacity(config.reward_window),
            done: true,
            terminated: false,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn account(&self) -> &AccountState {
        &self.account
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    fn day_of(&self, bar: usize) -> usize {
        bar / self.config.bars_per_day
    }

    fn day_has_lines(&self, day: usize) -> bool {
        self.lines.get(day).is_some_and(|l| l.is_some())
    }

    /// Starts a fresh account at `start_bar` and returns the first observation.
    pub fn reset(&mut self, start_bar: usize) -> Result<Observation, SimError> {
        let nd = self.config.bars_per_day;
        if !start_bar.is_multiple_of(nd) {
            return Err(SimError::Misaligned {
                start: start_bar,
                bars_per_day: nd,
            });
        }
        let required = self
            .lines
            .iter()
            .position(|l| l.is_some())
            .map_or(usize::MAX, |d| d * nd)
            .max(self.config.lookback);
        if start_bar < required {
            return Err(SimError::InsufficientWarmup {
                start: start_bar,
                required,
            });
        }
        if start_bar + nd > self.series.len() {
            return Err(SimError::EndOfData);
        }
        self.account = AccountState::new(self.config.initial_cash);
        self.terminated = false;
        self.cursor = start_bar;
        self.begin_episode();
        Ok(self.observe())
    }

    /// After a day-boundary `done`, opens the next day's episode on the same account.
    pub fn next_day(&mut self) -> Result<Observation, SimError> {
        if self.terminated {
            return Err(SimError::Terminated(self.cursor.saturating_sub(1)));
        }
        if !self.done {
            return Err(SimError::Policy("next_day called mid-episode".into()));
        }
        let nd = self.config.bars_per_day;
        if !self.cursor.is_multiple_of(nd)
            || self.cursor + nd > self.series.len()
            || !self.day_has_lines(self.day_of(self.cursor))
        {
            return Err(SimError::EndOfData);
        }
        self.begin_episode();
        Ok(self.observe())
    }

    fn begin_episode(&mut self) {
        self.episode_start_equity = self.account.equity;
        self.return_history.clear();
        self.done = false;
    }

    /// Indicator lines for the day containing the next bar.
    pub fn current_lines(&self) -> IndicatorVector {
        self.lines[self.day_of(self.cursor)].expect("episode day has indicator lines")
    }

    /// Last completed close, the price the policy sees when deciding.
    pub fn current_price(&self) -> f64 {
        self.series.bar(self.cursor - 1).close
    }

    pub fn observe(&self) -> Observation {
        let window = self
            .series
            .window(self.cursor, self.config.lookback)
            .expect("cursor satisfies the lookback");
        let last = window[window.len() - 1].close;
        let norm = |p: f64| 100.0 * (p / last - 1.0);
        let mut market = Vec::with_capacity(4 * window.len() + 3);
        for b in window {
            market.extend_from_slice(&[norm(b.open), norm(b.high), norm(b.low), norm(b.close)]);
        }
        let lines = self.current_lines();
        market.push(norm(lines.buy_line));
        market.push(norm(lines.sell_line));
        market.push(100.0 * lines.range_val / last);
        Observation {
            market_features: market,
            portfolio_features: [
                (self.account.equity - self.episode_start_equity) / self.config.initial_cash,
                f64::from(self.account.position),
            ],
        }
    }

    fn fill(&mut self, sign: i8, open: f64) -> f64 {
        // sign > 0 buys, sign < 0 sells
        let price = open + f64::from(sign) * self.config.slippage;
        let fee = self.config.fee_rate * price * self.config.contract_multiplier;
        self.account.cash -= fee;
        self.account.cumulative_fees += fee;
        self.account.cumulative_slippage += self.config.slippage * self.config.contract_multiplier;
        price
    }

    /// Executes `action` (+1 long, -1 short) at the next bar.
    pub fn step(&mut self, action: i8) -> Result<StepResult, SimError> {
        if self.done {
            return Err(SimError::EpisodeDone);
        }
        if action != 1 && action != -1 {
            return Err(SimError::InvalidAction(action));
        }
        let i = self.cursor;
        let bar = *self.series.bar(i);
        let mult = self.config.contract_multiplier;
        let fees_before = self.account.cumulative_fees;
        let prev_equity = self.account.equity;

        if action != self.account.position {
            if self.account.position != 0 {
                let held = self.account.position;
                let exit = self.fill(-held, bar.open);
                self.account.cash += f64::from(held) * (exit - self.account.entry_price) * mult;
                self.account.position = 0;
            }
            self.account.entry_price = self.fill(action, bar.open);
            self.account.position = action;
        }
        self.account.mark(bar.close, mult);
        if !self.account.equity.is_finite() {
            return Err(SimError::NonFinite(i));
        }

        let profit = self.account.equity - prev_equity;
        let reward = match self.config.reward_kind {
            RewardKind::Sharpe => self.sharpe_reward(profit / self.config.initial_cash),
            RewardKind::Profit => {
                let reference = self.series.bar(i - 1).close;
                100.0 * profit / (mult * reference)
            }
        };

        self.cursor = i + 1;
        let loss_hit =
            self.account.equity <= (1.0 - self.config.loss_termination) * self.config.initial_cash;
        let margin_hit = self.account.cash < self.config.margin_rate * bar.close * mult;
        self.terminated = loss_hit || margin_hit;
        let day_end = self.cursor.is_multiple_of(self.config.bars_per_day)
            || self.cursor >= self.series.len();
        self.done = self.terminated || day_end;

        let observation =
            if self.cursor < self.series.len() && self.day_has_lines(self.day_of(self.cursor)) {
                self.observe()
            } else {
                // Terminal step at the end of the data: repeat the last observation layout.
                let saved = self.cursor;
                self.cursor = i;
                let obs = self.observe();
                self.cursor = saved;
                obs
            };

        Ok(StepResult {
            observation,
            reward,
            account_profit: profit,
            done: self.done,
            info: StepInfo {
                bar_index: i,
                equity: self.account.equity,
                position: self.account.position,
                fees_paid: self.account.cumulative_fees - fees_before,
                terminated: self.terminated,
            },
        })
    }

    fn sharpe_reward(&mut self, rate: f64) -> f64 {
        if self.return_history.len() == self.config.reward_window {
            self.return_history.pop_front();
        }
        self.return_history.push_back(rate);
        rolling_sharpe(self.return_history.make_contiguous())
    }
}

/// Mean over population std, std floored at [`SHARPE_STD_FLOOR`]; zero below two samples.
pub fn rolling_sharpe(rates: &[f64]) -> f64 {
    if rates.len() < 2 {
        return 0.0;
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    mean / var.sqrt().max(SHARPE_STD_FLOOR)
}

/// What a policy sees at a decision point.
#[derive(Debug, Clone)]
pub struct DecisionContext<'a> {
    pub observation: &'a Observation,
    pub bar_index: usize,
    pub position: i8,
    pub current_price: f64,
    pub lines: IndicatorVector,
    /// Index of the step within the current episode.
    pub step_in_episode: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub probs: [f64; 2],
    pub sign: i8,
}

impl Decision {
    pub fn from_sign(sign: i8) -> Self {
        let probs = if sign >= 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        Self {
            probs,
            sign: if sign >= 0 { 1 } else { -1 },
        }
    }

    /// Long when P(long) >= P(short).
    pub fn from_probs(probs: [f64; 2]) -> Self {
        Self {
            probs,
            sign: if probs[0] >= probs[1] { 1 } else { -1 },
        }
    }
}

pub trait Policy {
    /// Called before the first decision of every episode.
    fn begin_episode(&mut self) {}

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision;
}

/// Always holds the same side.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub i8);

impl Policy for ConstantPolicy {
    fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Decision {
        Decision::from_sign(self.0)
    }
}

impl<F> Policy for F
where
    F: FnMut(&DecisionContext<'_>) -> Decision,
{
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Decision {
        self(ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityPoint {
    pub bar_index: usize,
    pub timestamp: i64,
    pub equity: f64,
    pub position: i8,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub episodes: Vec<Episode>,
    /// Equity at every executed bar close.
    pub equity: Vec<EquityPoint>,
    pub initial_cash: f64,
    pub bars_per_day: usize,
    pub terminated: bool,
    pub final_account: AccountState,
}

impl RunResult {
    /// Equity values preceded by the initial cash.
    pub fn equity_values(&self) -> Vec<f64> {
        std::iter::once(self.initial_cash)
            .chain(self.equity.iter().map(|p| p.equity))
            .collect()
    }

    /// Initial cash followed by the equity at the close of each episode.
    pub fn daily_equity(&self) -> Vec<f64> {
        let mut out = vec![self.initial_cash];
        let mut k = 0;
        for ep in &self.episodes {
            k += ep.len();
            out.push(self.equity[k - 1].equity);
        }
        out
    }

    pub fn write_equity_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "bar_index,timestamp,equity,position,reward")?;
        for p in &self.equity {
            writeln!(
                out,
                "{},{},{},{},{}",
                p.bar_index, p.timestamp, p.equity, p.position, p.reward
            )?;
        }
        Ok(())
    }
}

/// Drives a policy over every complete trading day after warm-up, carrying the
/// account across days. Stops early if the account is terminated.
pub fn run_policy(
    series: &PriceSeries,
    policy: &mut dyn Policy,
    config: &SimConfig,
    params: &DualThrustParams,
) -> Result<RunResult, SimError> {
    let start = first_start_bar(params, config);
    run_policy_from(series, policy, config, params, start, usize::MAX)
}

/// Like [`run_policy`] but starting at `start_bar` and running at most `max_days` days.
pub fn run_policy_from(
    series: &PriceSeries,
    policy: &mut dyn Policy,
    config: &SimConfig,
    params: &DualThrustParams,
    start_bar: usize,
    max_days: usize,
) -> Result<RunResult, SimError> {
    let required = start_bar + config.bars_per_day;
    if series.len() < required {
        return Err(SimError::InsufficientData {
            required,
            available: series.len(),
        });
    }
    let mut env = TradingEnv::new(series, config, params)?;
    let mut obs = env.reset(start_bar)?;
    let mut episodes = Vec::new();
    let mut equity = Vec::new();
    let mut days = 0;
    loop {
        policy.begin_episode();
        let mut steps = Vec::new();
        loop {
            let ctx = DecisionContext {
                observation: &obs,
                bar_index: env.cursor(),
                position: env.account().position,
                current_price: env.current_price(),
                lines: env.current_lines(),
                step_in_episode: steps.len(),
            };
            let decision = policy.decide(&ctx);
            let result = env.step(decision.sign)?;
            steps.push(Step {
                bar_index: result.info.bar_index,
                observation: obs.to_vec(),
                action: decision.probs,
                sign: decision.sign,
                reward: result.reward,
                profit: result.account_profit,
                expert: None,
            });
            equity.push(EquityPoint {
                bar_index: result.info.bar_index,
                timestamp: series.bar(result.info.bar_index).timestamp,
                equity: result.info.equity,
                position: result.info.position,
                reward: result.reward,
            });
            obs = result.observation;
            if result.done {
                break;
            }
        }
        episodes.push(Episode::new(steps, false));
        days += 1;
        if env.is_terminated() || days >= max_days {
            break;
        }
        match env.next_day() {
            Ok(next) => obs = next,
            Err(SimError::EndOfData) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(RunResult {
        episodes,
        equity,
        initial_cash: config.initial_cash,
        bars_per_day: config.bars_per_day,
        terminated: env.is_terminated(),
        final_account: *env.account(),
    })
}

/// Attaches hindsight-expert labels from each episode's full trading day of opens.
pub fn label_with_hindsight(series: &PriceSeries, bars_per_day: usize, episode: &mut Episode) {
    let Some(first) = episode.steps.first() else {
        return;
    };
    let day_start = first.bar_index / bars_per_day * bars_per_day;
    let day_end = (day_start + bars_per_day).min(series.len());
    let opens: Vec<f64> = series.bars()[day_start..day_end]
        .iter()
        .map(|b| b.open)
        .collect();
    let labels = indicators::hindsight_expert(&opens);
    for step in &mut episode.steps {
        step.expert = labels.get(&(step.bar_index - day_start)).copied();
    }
}
