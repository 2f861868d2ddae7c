//! Exogenous predictors: EWMA volatility ratio, intraday seasonal index, and
//! zero-mean spline forecasts fitted on a trailing window of days.

mod ewma;
mod spline;

use chrono::{DateTime, TimeZone, Timelike};
use chrono_tz::America::Chicago;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ewma::{ewma_vol, normalize_returns, vol_ratio, EwmaConfig};
pub use spline::{fit_zero_mean_spline, PredictorKind, SplinePredictor};

/// Minutes in the 01:00–15:15 Chicago session, both ends included.
pub const SESSION_MINUTES: usize = 856;
pub const SESSION_OPEN_MINUTE: u32 = 60;

/// Minute-of-session bucket in `1..=856`: 01:00 Chicago is 1, 15:15 is 856.
pub fn seasonal_index<Tz: TimeZone>(ts: &DateTime<Tz>) -> Result<usize> {
    let local = ts.with_timezone(&Chicago);
    let minute = local.hour() * 60 + local.minute();
    if minute < SESSION_OPEN_MINUTE || minute >= SESSION_OPEN_MINUTE + SESSION_MINUTES as u32 {
        return Err(Error::OutOfSession(local.to_rfc3339()));
    }
    Ok((minute - SESSION_OPEN_MINUTE) as usize + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RollingSplineConfig {
    /// Trailing window length in days.
    pub window_days: usize,
    pub knots: usize,
}

impl Default for RollingSplineConfig {
    fn default() -> Self {
        RollingSplineConfig {
            window_days: 66,
            knots: PredictorKind::VolatilityRatio.default_knots(),
        }
    }
}

/// Out-of-sample spline forecasts of standardized returns.
///
/// `day_starts[d]` is the first index of day `d`. Each day from `window_days`
/// on is forecast by a spline fitted to the pairs `(x, y_bar)` of the previous
/// `window_days` days and evaluated at that day's `x`. Earlier days and
/// undefined inputs give `None`. A predictor that is constant over the window
/// carries no information and forecasts zero.
pub fn rolling_spline_forecast(
    y_bar: &[Option<f64>],
    x: &[Option<f64>],
    day_starts: &[usize],
    cfg: &RollingSplineConfig,
) -> Result<Vec<Option<f64>>> {
    if y_bar.len() != x.len() {
        return Err(Error::input("returns and predictor are not aligned"));
    }
    if cfg.window_days == 0 {
        return Err(Error::param("window must span at least one day"));
    }
    if day_starts.first().is_some_and(|&s| s != 0) || day_starts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::input(
            "day starts must begin at 0 and be non-decreasing",
        ));
    }
    let n = y_bar.len();
    let day_end = |d: usize| day_starts.get(d + 1).copied().unwrap_or(n);
    let mut out = vec![None; n];
    for d in cfg.window_days..day_starts.len() {
        let (lo, hi) = (day_starts[d - cfg.window_days], day_starts[d]);
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            (lo..hi).filter_map(|t| Some((x[t]?, y_bar[t]?))).unzip();
        let constant = xs.windows(2).all(|w| w[0] == w[1]);
        let spline = if constant {
            None
        } else {
            let mut s = fit_zero_mean_spline(&xs, &ys, cfg.knots)?;
            s.window = Some((d - cfg.window_days, d));
            Some(s)
        };
        for t in day_starts[d]..day_end(d) {
            out[t] = x[t].map(|v| spline.as_ref().map_or(0.0, |s| s.eval(v)));
        }
    }
    Ok(out)
}
