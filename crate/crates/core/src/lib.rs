//! Recurrent deterministic-policy-gradient trading agent trained from Dual Thrust
//! demonstrations and Q-filtered behavior cloning, together with the minute-bar
//! simulator and backtest metrics used to evaluate it.

// `!(x > 0.0)` style checks are used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod cli;
pub mod indicators;
pub mod market_data;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod simulator;
