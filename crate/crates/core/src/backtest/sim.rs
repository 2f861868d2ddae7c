use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::data::{Instrument, ReturnSeries};
use crate::error::{Error, Result};
use crate::hmm::SignalSeries;
use crate::math::{mean, sample_variance};

/// Trading days per year used to annualize.
pub const TRADING_DAYS: f64 = 258.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CostModel {
    /// Charged per unit of position change, as a fraction of notional.
    pub proportional: f64,
    /// Charged once per position change.
    pub fixed: f64,
}

impl CostModel {
    pub fn new(proportional: f64, fixed: f64) -> Result<Self> {
        if !(proportional >= 0.0 && fixed >= 0.0) {
            return Err(Error::param("costs must be non-negative"));
        }
        Ok(CostModel {
            proportional,
            fixed,
        })
    }

    /// Half a tick per unit turnover at the given price level.
    pub fn half_tick(instrument: &Instrument, price: f64) -> Self {
        CostModel {
            proportional: 0.5 * instrument.tick_size / price,
            fixed: 0.0,
        }
    }

    pub fn from_bps(bps: f64) -> Result<Self> {
        Self::new(bps * 1e-4, 0.0)
    }

    fn charge(&self, turnover: f64) -> f64 {
        if turnover > 0.0 {
            self.proportional * turnover + self.fixed
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReturns {
    pub positions: Vec<f64>,
    pub gross: Vec<f64>,
    pub net: Vec<f64>,
    pub trades: usize,
}

/// Decisions in return time: `values[t]` is decided after observing `Δy_t`;
/// `opening` is the decision in force before the first return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSeries {
    pub opening: f64,
    pub values: SignalSeries,
}

impl DecisionSeries {
    pub fn new(opening: f64, values: SignalSeries) -> Result<Self> {
        if !(-1.0..=1.0).contains(&opening) {
            return Err(Error::param(format!(
                "opening decision {opening} outside [-1, 1]"
            )));
        }
        Ok(DecisionSeries { opening, values })
    }

    pub fn constant(value: f64, len: usize) -> Result<Self> {
        Self::new(value, SignalSeries::constant(value, len)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Turn forecasts made before each return into decisions taken after the
/// previous one: `decision[t] = forecast[t + 1]`, opening with `forecast[0]`.
/// The last decision is flat.
pub fn decisions_from_forecasts(forecasts: &SignalSeries) -> DecisionSeries {
    let v = forecasts.values();
    let mut out: Vec<f64> = v.iter().skip(1).copied().collect();
    out.push(0.0);
    DecisionSeries {
        opening: v.first().copied().unwrap_or(0.0),
        values: SignalSeries::new(out).expect("values already in range"),
    }
}

/// Per-minute strategy returns with a one-period lag: the position held over
/// `Δy_t` is `decision[t−1]` (the opening decision for `t = 0`). Each day is
/// entered at its first bar with the decision standing at the previous close
/// and flattened at its own close; every position change pays the cost model.
pub fn simulate(
    decisions: &DecisionSeries,
    returns: &ReturnSeries,
    cost: &CostModel,
) -> Result<StrategyReturns> {
    if decisions.len() != returns.len() {
        return Err(Error::input(format!(
            "signal length {} differs from return length {}",
            decisions.len(),
            returns.len()
        )));
    }
    let d = decisions.values.values();
    let y = &returns.values;
    let n = y.len();
    let mut out = StrategyReturns {
        positions: vec![0.0; n],
        gross: vec![0.0; n],
        net: vec![0.0; n],
        trades: 0,
    };
    for day in 0..returns.num_days() {
        let range = returns.day_range(day);
        let mut held = 0.0;
        for t in range.clone() {
            let pos = if t == 0 { decisions.opening } else { d[t - 1] };
            let turnover = (pos - held).abs();
            out.positions[t] = pos;
            out.gross[t] = pos * y[t];
            out.net[t] = out.gross[t] - cost.charge(turnover);
            out.trades += usize::from(turnover > 0.0);
            held = pos;
        }
        if let Some(last) = range.clone().last() {
            out.net[last] -= cost.charge(held.abs());
            out.trades += usize::from(held != 0.0);
        }
    }
    Ok(out)
}

/// `sqrt(N)·mean/std` of daily returns (sample std). `None` when the standard
/// deviation is zero.
pub fn sharpe(daily: &[f64], periods: f64) -> Result<Option<f64>> {
    if daily.len() < 2 {
        return Err(Error::InsufficientData(
            "Sharpe ratio needs at least two days".into(),
        ));
    }
    let sd = sample_variance(daily).sqrt();
    Ok((sd > 0.0 && sd.is_finite()).then(|| periods.sqrt() * mean(daily) / sd))
}

/// Pearson correlation; `None` when either input is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input(
            "correlation needs equal lengths of at least two",
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    Ok((saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub name: String,
    pub daily_returns: Vec<f64>,
    pub daily_gross: Vec<f64>,
    pub sharpe_pre: Option<f64>,
    pub sharpe_post: Option<f64>,
    pub trade_count: usize,
    pub total_return: f64,
}

impl StrategyReport {
    pub fn new(name: &str, sim: &StrategyReturns, returns: &ReturnSeries) -> Result<Self> {
        let daily = returns.daily_sums(&sim.net);
        let daily_gross = returns.daily_sums(&sim.gross);
        Ok(StrategyReport {
            name: name.to_string(),
            sharpe_pre: sharpe(&daily_gross, TRADING_DAYS)?,
            sharpe_post: sharpe(&daily, TRADING_DAYS)?,
            total_return: daily.iter().sum(),
            trade_count: sim.trades,
            daily_gross,
            daily_returns: daily,
        })
    }
}

/// Report for one strategy; `benchmarks` always include the long-only book.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config: serde_json::Value,
    pub dates: Vec<NaiveDate>,
    pub strategy: String,
    pub daily_returns: Vec<f64>,
    pub sharpe_pre: Option<f64>,
    pub sharpe_post: Option<f64>,
    pub trade_count: usize,
    /// Correlation of the strategy's daily returns with each benchmark.
    pub correlations: BTreeMap<String, Option<f64>>,
    pub benchmarks: Vec<StrategyReport>,
}

impl BacktestReport {
    pub fn build(
        config: serde_json::Value,
        returns: &ReturnSeries,
        strategy: StrategyReport,
        mut benchmarks: Vec<StrategyReport>,
    ) -> Result<Self> {
        if !benchmarks.iter().any(|b| b.name == "long_only") {
            let long = simulate(
                &DecisionSeries::constant(1.0, returns.len())?,
                returns,
                &CostModel::default(),
            )?;
            benchmarks.insert(0, StrategyReport::new("long_only", &long, returns)?);
        }
        let correlations = benchmarks
            .iter()
            .map(|b| {
                Ok((
                    b.name.clone(),
                    correlation(&strategy.daily_returns, &b.daily_returns)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(BacktestReport {
            config,
            dates: returns.dates.clone(),
            strategy: strategy.name,
            daily_returns: strategy.daily_returns,
            sharpe_pre: strategy.sharpe_pre,
            sharpe_post: strategy.sharpe_post,
            trade_count: strategy.trade_count,
            correlations,
            benchmarks,
        })
    }

    /// Cumulative daily returns, long format: `date,strategy,cumret`.
    pub fn write_plot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "strategy", "cumret"])?;
        let series = std::iter::once((&self.strategy, &self.daily_returns))
            .chain(self.benchmarks.iter().map(|b| (&b.name, &b.daily_returns)));
        for (name, daily) in series {
            let mut acc = 0.0;
            for (date, r) in self.dates.iter().zip(daily) {
                acc += r;
                w.write_record([date.to_string(), name.clone(), acc.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
