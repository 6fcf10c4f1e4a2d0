//! Backtest statistics: total return, Sharpe ratio, volatility and maximum drawdown.
//!
//! Returns are simple fractional changes between consecutive equity values, with
//! no annualization. Standard deviations are population (divide by n).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulator::RunResult;

/// Standard deviation below which the Sharpe ratio is reported as undefined.
pub const SHARPE_STD_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("need at least {required} values, got {found}")]
    TooShort { required: usize, found: usize },
    #[error("equity values must be finite and positive (index {0})")]
    InvalidValue(usize),
    #[error("undefined Sharpe: returns have zero variance")]
    UndefinedSharpe,
}

/// Account value at successive closes.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityCurve {
    values: Vec<f64>,
}

impl EquityCurve {
    pub fn new(values: Vec<f64>) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::TooShort {
                required: 1,
                found: 0,
            });
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MetricsError::InvalidValue(i));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
    }
}

pub fn total_return(curve: &EquityCurve) -> Result<f64, MetricsError> {
    let v = curve.values();
    if v.len() < 2 {
        return Err(MetricsError::TooShort {
            required: 2,
            found: v.len(),
        });
    }
    Ok((v[v.len() - 1] - v[0]) / v[0])
}

fn mean_std(returns: &[f64]) -> Result<(f64, f64), MetricsError> {
    if returns.len() < 2 {
        return Err(MetricsError::TooShort {
            required: 2,
            found: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub fn sharpe(returns: &[f64]) -> Result<f64, MetricsError> {
    let (mean, std) = mean_std(returns)?;
    if std < SHARPE_STD_MIN {
        return Err(MetricsError::UndefinedSharpe);
    }
    Ok(mean / std)
}

pub fn volatility(returns: &[f64]) -> Result<f64, MetricsError> {
    mean_std(returns).map(|(_, std)| std)
}

/// Largest peak-to-trough loss as a fraction of the peak; 0 for a curve that never falls.
pub fn max_drawdown(curve: &EquityCurve) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in curve.values() {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    worst
}

/// Sharpe, volatility and drawdown at one sampling frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyStats {
    /// `None` when the returns have zero variance or there are fewer than two.
    pub sr: Option<f64>,
    pub vol: Option<f64>,
    pub mdd: f64,
}

impl FrequencyStats {
    pub fn from_curve(curve: &EquityCurve) -> Self {
        let r = curve.returns();
        Self {
            sr: sharpe(&r).ok(),
            vol: volatility(&r).ok(),
            mdd: max_drawdown(curve),
        }
    }
}

/// Headline statistics on the daily curve, with per-bar figures alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tr: f64,
    pub sr: Option<f64>,
    pub vol: Option<f64>,
    pub mdd: f64,
    pub per_bar: FrequencyStats,
}

impl MetricReport {
    pub fn from_curves(daily: &EquityCurve, per_bar: &EquityCurve) -> Result<Self, MetricsError> {
        let headline = FrequencyStats::from_curve(daily);
        Ok(Self {
            tr: total_return(per_bar)?,
            sr: headline.sr,
            vol: headline.vol,
            mdd: headline.mdd,
            per_bar: FrequencyStats::from_curve(per_bar),
        })
    }

    pub fn from_run(run: &RunResult) -> Result<Self, MetricsError> {
        let daily = EquityCurve::new(run.daily_equity())?;
        let bars = EquityCurve::new(run.equity_values())?;
        Self::from_curves(&daily, &bars)
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

/// Plain-text table with columns Methods, Tr(%), Sr, Vol, Mdd(%).
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("Methods".len());
    let mut out = format!(
        "{:<width$}  {:>9}  {:>8}  {:>8}  {:>8}\n",
        "Methods", "Tr(%)", "Sr", "Vol", "Mdd(%)"
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>9.2}  {:>8}  {:>8}  {:>8.2}\n",
            name,
            100.0 * r.tr,
            fmt_opt(r.sr, 3),
            fmt_opt(r.vol, 4),
            100.0 * r.mdd
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(v: &[f64]) -> EquityCurve {
        EquityCurve::new(v.to_vec()).unwrap()
    }

    #[test]
    fn total_return_cases() {
        assert!((total_return(&curve(&[1_000_000.0, 1_200_000.0])).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(total_return(&curve(&[5.0, 5.0, 5.0])).unwrap(), 0.0);
        assert_eq!(total_return(&curve(&[100.0, 50.0])).unwrap(), -0.5);
        assert!(total_return(&curve(&[100.0])).is_err());
    }

    #[test]
    fn sharpe_cases() {
        assert_eq!(sharpe(&[0.01, -0.01]).unwrap(), 0.0);
        assert_eq!(sharpe(&[0.01, 0.01]), Err(MetricsError::UndefinedSharpe));
        let s = sharpe(&[0.02, 0.0, 0.01]).unwrap();
        assert!((s - 1.5f64.sqrt()).abs() < 1e-12);
        assert!(sharpe(&[0.1]).is_err());
    }

    #[test]
    fn volatility_cases() {
        assert_eq!(volatility(&[0.3, 0.3, 0.3]).unwrap(), 0.0);
        assert!((volatility(&[0.01, -0.01]).unwrap() - 0.01).abs() < 1e-18);
        assert!(volatility(&[]).is_err());
    }

    #[test]
    fn drawdown_cases() {
        assert_eq!(max_drawdown(&curve(&[100.0, 120.0, 90.0, 110.0])), 0.25);
        assert_eq!(max_drawdown(&curve(&[1.0, 2.0, 3.0])), 0.0);
        assert_eq!(max_drawdown(&curve(&[7.0])), 0.0);
    }

    #[test]
    fn curve_validation() {
        assert!(EquityCurve::new(vec![]).is_err());
        assert_eq!(
            EquityCurve::new(vec![1.0, 0.0]),
            Err(MetricsError::InvalidValue(1))
        );
        assert_eq!(
            EquityCurve::new(vec![f64::NAN]),
            Err(MetricsError::InvalidValue(0))
        );
    }

    #[test]
    fn report_and_table() {
        let daily = curve(&[100.0, 110.0, 99.0]);
        let bars = curve(&[100.0, 105.0, 110.0, 104.0, 99.0]);
        let r = MetricReport::from_curves(&daily, &bars).unwrap();
        assert!((r.tr + 0.01).abs() < 1e-15);
        assert!((r.mdd - 0.1).abs() < 1e-15);
        assert!((r.per_bar.mdd - 0.1).abs() < 1e-15);
        let t = format_table(&[("Long&Hold".into(), r)]);
        assert!(t.starts_with("Methods"));
        assert!(t.contains("Long&Hold"));
        assert!(t.contains("-1.00"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.starts_with("{\"tr\":"));
    }

    #[test]
    fn flat_report_has_no_sharpe() {
        let c = curve(&[10.0, 10.0, 10.0]);
        let r = MetricReport::from_curves(&c, &c).unwrap();
        assert_eq!(r.sr, None);
        assert_eq!(r.vol, Some(0.0));
        assert!(format_table(&[("x".into(), r)]).contains("n/a"));
    }
}
