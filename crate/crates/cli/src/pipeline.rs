//! Data loading, predictor construction, and the persisted model format.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use momentum_hmm::backtest::{to_returns, BarSeries, ReturnSeries};
use momentum_hmm::iohmm::{iohmm_signal, IohmmParams};
use momentum_hmm::side_info::{normalize_returns, vol_ratio};
use momentum_hmm::{hmm::run_hmm_signal, HmmParams, SignalSeries, TransferFunction, TrendGrid};

use crate::config::{Learner, Predictor, RunConfig};

/// A learned model as written by `learn`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelFile {
    Hmm {
        learner: Learner,
        params: HmmParams,
    },
    Iohmm {
        predictor: Predictor,
        params: IohmmParams,
    },
}

impl ModelFile {
    pub fn name(&self) -> String {
        match self {
            ModelFile::Hmm { learner, .. } => format!("{learner:?}").to_lowercase(),
            ModelFile::Iohmm { predictor, .. } => format!("iohmm-{predictor:?}").to_lowercase(),
        }
    }

    /// Forecast signal over the whole series; `signal[t]` uses returns before `t`.
    pub fn signal(
        &self,
        cfg: &RunConfig,
        returns: &ReturnSeries,
        tf: TransferFunction,
    ) -> anyhow::Result<SignalSeries> {
        Ok(match self {
            ModelFile::Hmm { params, .. } => run_hmm_signal(&returns.values, params, tf)?,
            ModelFile::Iohmm { predictor, params } => {
                let x = predictor_series(cfg, *predictor, returns)?;
                iohmm_signal(&returns.values, &x, params, tf)?
            }
        })
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

pub fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Bars, their intraday returns, and the train/test split.
pub struct Market {
    pub bars: BarSeries,
    pub returns: ReturnSeries,
    pub train_days: usize,
}

impl Market {
    pub fn load(path: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<Self> {
        let Some(path) = path else {
            bail!("--input is required")
        };
        let bars: BarSeries = read_json(path)?;
        let returns = to_returns(&bars)?;
        if returns.num_days() == 0 {
            bail!("{} contains no trading days", path.display());
        }
        let train_days = cfg
            .train_days
            .unwrap_or(returns.num_days())
            .min(returns.num_days());
        Ok(Market {
            bars,
            returns,
            train_days,
        })
    }

    pub fn train(&self) -> ReturnSeries {
        self.returns.slice_days(0, self.train_days)
    }

    /// Held-out days, or every day when nothing is held out.
    pub fn test_range(&self) -> (usize, usize) {
        let n = self.returns.num_days();
        if self.train_days < n {
            (self.train_days, n)
        } else {
            (0, n)
        }
    }

    /// Training closes concatenated across days.
    pub fn train_prices(&self) -> Vec<f64> {
        self.bars.days[..self.train_days]
            .iter()
            .flat_map(|d| d.closes.iter().copied())
            .collect()
    }

    /// Return grid with one price tick as spacing, wide enough for every return.
    pub fn grid(&self) -> anyhow::Result<TrendGrid> {
        let mut closes: Vec<f64> = self
            .bars
            .days
            .iter()
            .flat_map(|d| d.closes.iter().copied())
            .collect();
        closes.sort_by(f64::total_cmp);
        let median = closes[closes.len() / 2];
        let tick = self.bars.instrument.tick_size / median;
        Ok(TrendGrid::covering(&self.returns.values, tick)?)
    }
}

/// Exogenous input aligned with `returns`; undefined during warm-up.
pub fn predictor_series(
    cfg: &RunConfig,
    predictor: Predictor,
    returns: &ReturnSeries,
) -> anyhow::Result<Vec<Option<f64>>> {
    Ok(match predictor {
        Predictor::Seasonal => returns.seasonal_series().into_iter().map(Some).collect(),
        Predictor::Volratio => {
            let s = &cfg.side_info;
            vol_ratio(&returns.values, s.lambda, s.fast_window, s.slow_window)?
        }
    })
}

/// Standardized returns used as the spline response.
pub fn standardized(cfg: &RunConfig, returns: &ReturnSeries) -> anyhow::Result<Vec<Option<f64>>> {
    let n = &cfg.side_info.normalize;
    Ok(normalize_returns(&returns.values, n, n)?)
}

/// Signal restricted to days `[from, to)`.
pub fn slice_signal(
    signal: &SignalSeries,
    returns: &ReturnSeries,
    from: usize,
    to: usize,
) -> anyhow::Result<SignalSeries> {
    let lo = returns
        .day_starts
        .get(from)
        .copied()
        .unwrap_or(returns.len());
    let hi = returns.day_starts.get(to).copied().unwrap_or(returns.len());
    Ok(SignalSeries::new(signal.values()[lo..hi].to_vec())?)
}
