use qtlab::agent::TrainConfig;
use qtlab::indicators::DualThrustParams;
use qtlab::market_data::{synth_series, Bar, PriceSeries, SynthKind, SynthParams};
use qtlab::simulator::{run_policy_from, Decision, DecisionContext, RewardKind, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::conservation_equity;

pub const SINE_DAY: usize = 60;

/// Slow sine: a period spans four 60-bar days; the first 40 days train, the last 20 test.
pub fn sine_split() -> (PriceSeries, PriceSeries) {
    let p = SynthParams {
        period: 240.0,
        noise: 0.1,
        ..Default::default()
    };
    let s = synth_series(SynthKind::Sine, SINE_DAY * 60, 1, &p).unwrap();
    s.split_at_timestamp(s.bar(SINE_DAY * 40).timestamp)
        .unwrap()
}

pub fn sine_sim() -> SimConfig {
    SimConfig {
        bars_per_day: SINE_DAY,
        lookback: 10,
        initial_cash: 10_000.0,
        reward_kind: RewardKind::Profit,
        ..Default::default()
    }
}

pub fn sine_dt() -> DualThrustParams {
    DualThrustParams {
        n: 1,
        k1: 0.1,
        k2: 0.1,
    }
}

pub fn sine_train_config() -> TrainConfig {
    TrainConfig {
        hidden_dim: 16,
        critic_head_dim: 16,
        lr_actor: 1e-3,
        pretrain_steps: 200,
        rollouts: 60,
        seed: 1,
        ..Default::default()
    }
}

/// Config file equivalent of the sine fixture, without an output directory.
pub const SINE_TOML: &str = r#"
seed = 1
ablation = "qtnet"

[data]
split_timestamp = 2400

[data.synth]
kind = "sine"
length = 3600
seed = 1
period = 240.0
noise = 0.1

[sim]
bars_per_day = 60
lookback = 10
initial_cash = 10000.0
reward_kind = "profit"

[dual_thrust]
n = 1
k1 = 0.1
k2 = 0.1

[train]
hidden_dim = 16
critic_head_dim = 16
lr_actor = 1e-3
pretrain_steps = 200
rollouts = 60
"#;

/// Random valid OHLC bars.
pub fn random_bars(n: usize, rng: &mut ChaCha8Rng) -> Vec<Bar> {
    let mut price = rng.random_range(50.0..150.0);
    (0..n)
        .map(|t| {
            let open: f64 = price;
            let close: f64 = (open + rng.random_range(-2.0..2.0)).max(1.0);
            let high = open.max(close) + rng.random_range(0.0..1.0);
            let low = (open.min(close) - rng.random_range(0.0..1.0)).max(0.5);
            price = close + rng.random_range(-0.5..0.5);
            Bar::new(t as i64, open, high, low, close)
        })
        .collect()
}

/// Runs a random action sequence on a random-walk series with fees and slippage
/// and returns the largest gap between the simulator equity and the oracle.
pub fn conservation_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = rng.random_range(5..30);
    let days = rng.random_range(2..5);
    let lookback = rng.random_range(1..=nd);
    let params = SynthParams {
        noise: rng.random_range(0.1..2.0),
        drift: rng.random_range(-0.05..0.05),
        ..Default::default()
    };
    let series = synth_series(SynthKind::RandomWalk, nd * (days + 1), seed, &params).unwrap();
    let cfg = SimConfig {
        bars_per_day: nd,
        lookback,
        fee_rate: rng.random_range(0.0..1e-3),
        slippage: rng.random_range(0.0..0.5),
        contract_multiplier: rng.random_range(1.0..300.0),
        initial_cash: 1e7,
        ..Default::default()
    };
    let dt = DualThrustParams {
        n: 1,
        ..Default::default()
    };
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAC);
    let mut policy = |_: &DecisionContext<'_>| {
        Decision::from_sign(if action_rng.random_bool(0.5) { 1 } else { -1 })
    };
    let run = run_policy_from(&series, &mut policy, &cfg, &dt, nd, days).unwrap();
    let start = run.equity[0].bar_index;
    let bars = &series.bars()[start..start + run.equity.len()];
    let positions: Vec<i8> = run.equity.iter().map(|p| p.position).collect();
    let expected = conservation_equity(bars, &positions, &cfg);
    run.equity
        .iter()
        .zip(expected)
        .map(|(p, e)| (p.equity - e).abs())
        .fold(0.0, f64::max)
}
