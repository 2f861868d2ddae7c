use std::collections::BTreeMap;
use std::io::Read;

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Weekday};
use chrono_tz::America::Chicago;
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::side_info::{SESSION_MINUTES, SESSION_OPEN_MINUTE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Instrument {
    pub tick_size: f64,
    /// Trading days before the last traded date at which to switch contracts.
    pub roll_offset_days: usize,
}

impl Default for Instrument {
    fn default() -> Self {
        Instrument {
            tick_size: 0.25,
            roll_offset_days: 12,
        }
    }
}

impl Instrument {
    pub fn round_to_tick(&self, price: f64) -> f64 {
        (price / self.tick_size).round() * self.tick_size
    }

    fn on_tick(&self, price: f64) -> bool {
        let q = price / self.tick_size;
        (q - q.round()).abs() <= 1e-6 * q.abs().max(1.0)
    }
}

/// One session of closes on the 01:00–15:15 Chicago minute grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingDay {
    pub date: NaiveDate,
    pub closes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarSeries {
    pub instrument: Instrument,
    pub days: Vec<TradingDay>,
}

/// Intraday log returns, concatenated across days. No return spans a day
/// boundary, so each full day contributes 855 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub values: Vec<f64>,
    pub day_starts: Vec<usize>,
    pub dates: Vec<NaiveDate>,
}

impl ReturnSeries {
    /// Equal-length days with synthetic dates, for model-level experiments.
    pub fn from_days(values: Vec<f64>, per_day: usize) -> Result<Self> {
        if per_day == 0 || values.len() % per_day != 0 {
            return Err(Error::input(
                "return count is not a multiple of the day length",
            ));
        }
        let n = values.len() / per_day;
        let base = NaiveDate::from_ymd_opt(2000, 1, 3).unwrap();
        Ok(ReturnSeries {
            values,
            day_starts: (0..n).map(|d| d * per_day).collect(),
            dates: (0..n).map(|d| base + chrono::Days::new(d as u64)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_days(&self) -> usize {
        self.day_starts.len()
    }

    pub fn day_range(&self, d: usize) -> std::ops::Range<usize> {
        let end = self
            .day_starts
            .get(d + 1)
            .copied()
            .unwrap_or(self.values.len());
        self.day_starts[d]..end
    }

    /// Sum of `x` over each day; `x` must be aligned with the returns.
    pub fn daily_sums(&self, x: &[f64]) -> Vec<f64> {
        (0..self.num_days())
            .map(|d| x[self.day_range(d)].iter().sum())
            .collect()
    }

    /// Minute-of-session bucket of the bar each return ends on (2..=856).
    pub fn seasonal_series(&self) -> Vec<f64> {
        (0..self.num_days())
            .flat_map(|d| {
                self.day_range(d)
                    .map(move |t| (t - self.day_starts[d] + 2) as f64)
            })
            .collect()
    }

    /// Days `[from, to)` as a new series.
    pub fn slice_days(&self, from: usize, to: usize) -> ReturnSeries {
        let lo = self
            .day_starts
            .get(from)
            .copied()
            .unwrap_or(self.values.len());
        let hi = self
            .day_starts
            .get(to)
            .copied()
            .unwrap_or(self.values.len());
        ReturnSeries {
            values: self.values[lo..hi].to_vec(),
            day_starts: self.day_starts[from..to].iter().map(|s| s - lo).collect(),
            dates: self.dates[from..to].to_vec(),
        }
    }
}

pub fn to_returns(bars: &BarSeries) -> Result<ReturnSeries> {
    let mut values = Vec::new();
    let mut day_starts = Vec::new();
    let mut dates = Vec::new();
    for day in &bars.days {
        if let Some(p) = day.closes.iter().find(|p| !(**p > 0.0)) {
            return Err(Error::input(format!(
                "non-positive price {p} on {}",
                day.date
            )));
        }
        day_starts.push(values.len());
        dates.push(day.date);
        values.extend(day.closes.windows(2).map(|w| (w[1] / w[0]).ln()));
    }
    Ok(ReturnSeries {
        values,
        day_starts,
        dates,
    })
}

struct Tick {
    contract: String,
    date: NaiveDate,
    minute: usize,
    price: f64,
}

/// Aggregate a tick CSV (`timestamp,price[,volume][,contract]`) onto minute bars.
///
/// Each bar carries the last trade price of its minute. Empty minutes are
/// forward-filled; minutes before the first trade of a day take that first
/// trade. Ticks outside the session or on weekends are discarded. With a
/// `contract` column, the series rolls to the next contract
/// `roll_offset_days` trading days before each contract's last traded date
/// and earlier contracts are back-adjusted by the price gap on the roll day.
pub fn ingest_ticks<R: Read>(source: R, instrument: &Instrument) -> Result<BarSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (ts_col, px_col) = match (col("timestamp"), col("price")) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "header must contain timestamp and price".into(),
            })
        }
    };
    let contract_col = col("contract");

    let mut ticks = Vec::new();
    let mut last_ts: Option<DateTime<Tz>> = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| Error::Parse { line, msg };
        let ts_raw = rec
            .get(ts_col)
            .ok_or_else(|| bad("missing timestamp".into()))?;
        let ts = DateTime::parse_from_rfc3339(ts_raw)
            .map_err(|e| bad(format!("timestamp {ts_raw:?}: {e}")))?
            .with_timezone(&Chicago);
        let px_raw = rec.get(px_col).ok_or_else(|| bad("missing price".into()))?;
        let price: f64 = px_raw
            .parse()
            .map_err(|_| bad(format!("price {px_raw:?} is not a number")))?;
        if !(price > 0.0 && price.is_finite()) {
            return Err(bad(format!("price {price} must be positive")));
        }
        if !instrument.on_tick(price) {
            return Err(bad(format!(
                "price {price} is not a multiple of the tick {}",
                instrument.tick_size
            )));
        }
        if last_ts.is_some_and(|prev| ts < prev) {
            return Err(Error::NonMonotone { line });
        }
        last_ts = Some(ts);

        let minute = (ts.hour() * 60 + ts.minute()) as i64 - SESSION_OPEN_MINUTE as i64;
        let weekday = !matches!(ts.weekday(), Weekday::Sat | Weekday::Sun);
        if !weekday || minute < 0 || minute >= SESSION_MINUTES as i64 {
            continue;
        }
        let contract = contract_col
            .and_then(|c| rec.get(c))
            .unwrap_or("")
            .to_string();
        ticks.push(Tick {
            contract,
            date: ts.date_naive(),
            minute: minute as usize,
            price: instrument.round_to_tick(price),
        });
    }

    // Per contract and date: last price per minute.
    let mut minute_px: BTreeMap<(String, NaiveDate), Vec<Option<f64>>> = BTreeMap::new();
    for t in &ticks {
        minute_px
            .entry((t.contract.clone(), t.date))
            .or_insert_with(|| vec![None; SESSION_MINUTES])[t.minute] = Some(t.price);
    }
    let bars_of = |key: &(String, NaiveDate)| -> Option<Vec<f64>> {
        let m = minute_px.get(key)?;
        let first = m.iter().flatten().next().copied()?;
        let mut last = first;
        Some(
            m.iter()
                .map(|p| {
                    if let Some(v) = p {
                        last = *v;
                    }
                    last
                })
                .collect(),
        )
    };

    let dates: Vec<NaiveDate> = {
        let mut d: Vec<NaiveDate> = minute_px.keys().map(|k| k.1).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let mut contracts: Vec<(NaiveDate, String)> = {
        let mut last: BTreeMap<&str, NaiveDate> = BTreeMap::new();
        for (c, d) in minute_px.keys() {
            let e = last.entry(c.as_str()).or_insert(*d);
            *e = (*e).max(*d);
        }
        last.into_iter().map(|(c, d)| (d, c.to_string())).collect()
    };
    contracts.sort();

    // Active contract by date: contract i covers dates up to its roll date.
    let roll_index: Vec<usize> = contracts
        .iter()
        .map(|(last, _)| {
            let pos = dates.partition_point(|d| d <= last) - 1;
            pos.saturating_sub(instrument.roll_offset_days)
        })
        .collect();
    let active = |di: usize| -> usize {
        roll_index
            .iter()
            .take(contracts.len() - 1)
            .position(|&r| di <= r)
            .unwrap_or(contracts.len() - 1)
    };

    // Gap added to contract i so it joins contract i+1 on the roll day.
    let mut gaps = vec![0.0; contracts.len()];
    for i in (0..contracts.len().saturating_sub(1)).rev() {
        let roll_date = dates[roll_index[i]];
        let old = bars_of(&(contracts[i].1.clone(), roll_date));
        let new = bars_of(&(contracts[i + 1].1.clone(), roll_date));
        let gap = match (old, new) {
            (Some(o), Some(n)) => n[SESSION_MINUTES - 1] - o[SESSION_MINUTES - 1],
            _ => {
                return Err(Error::input(format!(
                    "contracts {} and {} do not both trade on roll date {roll_date}",
                    contracts[i].1,
                    contracts[i + 1].1
                )))
            }
        };
        gaps[i] = gaps[i + 1] + gap;
    }

    let mut days = Vec::new();
    for (di, &date) in dates.iter().enumerate() {
        let ci = active(di);
        if let Some(closes) = bars_of(&(contracts[ci].1.clone(), date)) {
            let g = gaps[ci];
            days.push(TradingDay {
                date,
                closes: closes.into_iter().map(|p| p + g).collect(),
            });
        }
    }
    Ok(BarSeries {
        instrument: instrument.clone(),
        days,
    })
}
