use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::{BarSeries, Instrument, TradingDay};
use crate::error::{Error, Result};
use crate::hmm::HmmParams;
use crate::side_info::SESSION_MINUTES;

/// Returns per synthetic day.
pub const RETURNS_PER_DAY: usize = SESSION_MINUTES - 1;

struct Sampler<'a> {
    params: &'a HmmParams,
    cdf: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(params: &'a HmmParams) -> Self {
        let cdf = (0..params.k())
            .map(|k| {
                let mut acc = 0.0;
                params
                    .log_emission_row(k)
                    .iter()
                    .map(|l| {
                        acc += l.exp();
                        acc
                    })
                    .collect()
            })
            .collect();
        Sampler { params, cdf }
    }

    fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &w) in p.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }

    fn next_state<R: Rng + ?Sized>(&self, prev: Option<usize>, rng: &mut R) -> usize {
        match prev {
            None => Self::categorical(self.params.initial(), rng),
            Some(s) => Self::categorical(self.params.transition_row(s), rng),
        }
    }

    fn emit<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> f64 {
        let c = &self.cdf[state];
        let u: f64 = rng.random::<f64>() * c[c.len() - 1];
        let g = c.partition_point(|&v| v <= u).min(c.len() - 1);
        self.params.grid().value(g)
    }
}

/// Draw `n` returns and latent states from the generative model.
pub fn simulate_returns<R: Rng + ?Sized>(
    params: &HmmParams,
    n: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<usize>) {
    let s = Sampler::new(params);
    let mut states = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    let mut prev = None;
    for _ in 0..n {
        let m = s.next_state(prev, rng);
        returns.push(s.emit(m, rng));
        states.push(m);
        prev = Some(m);
    }
    (returns, states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputProcess {
    /// Minute-of-session bucket of each return.
    Seasonal,
    /// `x_t = φ x_{t−1} + σ ε_t`, continuing across days.
    Ar1 { phi: f64, sigma: f64 },
}

/// Parameters switched by an observed input: `regimes[r]` is active while the
/// input lies in bucket `r` of the ascending `thresholds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDependence {
    pub process: InputProcess,
    pub thresholds: Vec<f64>,
    pub regimes: Vec<HmmParams>,
}

impl InputDependence {
    pub fn bucket(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&th| th <= x)
    }

    fn validate(&self) -> Result<()> {
        if self.regimes.len() != self.thresholds.len() + 1 {
            return Err(Error::param("need one regime per input bucket"));
        }
        let k = self.regimes[0].k();
        if self
            .regimes
            .iter()
            .any(|p| p.k() != k || p.grid() != self.regimes[0].grid())
        {
            return Err(Error::param("regimes must share K and the grid"));
        }
        if self.thresholds.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("thresholds must be increasing"));
        }
        Ok(())
    }

    fn input<R: Rng + ?Sized>(&self, days: usize, rng: &mut R) -> Vec<f64> {
        let n = days * RETURNS_PER_DAY;
        match self.process {
            InputProcess::Seasonal => (0..n).map(|t| (t % RETURNS_PER_DAY + 2) as f64).collect(),
            InputProcess::Ar1 { phi, sigma } => {
                let mut x = 0.0;
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        x = phi * x + sigma * z;
                        x
                    })
                    .collect()
            }
        }
    }
}

/// Input-switched generative model: the transition into `m_t` and the
/// emission of `Δy_t` use the regime of `x_t`.
pub fn simulate_input_returns<R: Rng + ?Sized>(
    dep: &InputDependence,
    x: &[f64],
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<usize>)> {
    dep.validate()?;
    let samplers: Vec<Sampler> = dep.regimes.iter().map(Sampler::new).collect();
    let mut states = Vec::with_capacity(x.len());
    let mut returns = Vec::with_capacity(x.len());
    let mut prev = None;
    for &xt in x {
        let s = &samplers[dep.bucket(xt)];
        let m = s.next_state(prev, rng);
        returns.push(s.emit(m, rng));
        states.push(m);
        prev = Some(m);
    }
    Ok((returns, states))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub params: HmmParams,
    pub days: usize,
    pub start_price: f64,
    pub instrument: Instrument,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputDependence>,
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub bars: BarSeries,
    pub states: Vec<usize>,
    /// Model returns before prices are rounded to the tick.
    pub returns: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

/// Simulate a market: latent trend path, grid returns, and tick-rounded
/// prices `p_t = round(P₀ exp(Σ Δy))`, one 856-bar session per day.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticMarket> {
    if spec.days == 0 {
        return Err(Error::param("at least one day is required"));
    }
    if !(spec.start_price > 0.0) {
        return Err(Error::param("start price must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.days * RETURNS_PER_DAY;
    let (returns, states, input) = match &spec.input {
        None => {
            let (r, s) = simulate_returns(&spec.params, n, &mut rng);
            (r, s, None)
        }
        Some(dep) => {
            let x = dep.input(spec.days, &mut rng);
            let (r, s) = simulate_input_returns(dep, &x, &mut rng)?;
            (r, s, Some(x))
        }
    };

    let base = chrono::NaiveDate::from_ymd_opt(2011, 1, 3).unwrap();
    let mut log_level = 0.0;
    let mut days = Vec::with_capacity(spec.days);
    let mut date = base;
    for d in 0..spec.days {
        let mut closes = Vec::with_capacity(SESSION_MINUTES);
        closes.push(
            spec.instrument
                .round_to_tick(spec.start_price * f64::exp(log_level)),
        );
        for &r in &returns[d * RETURNS_PER_DAY..(d + 1) * RETURNS_PER_DAY] {
            log_level += r;
            closes.push(
                spec.instrument
                    .round_to_tick(spec.start_price * log_level.exp()),
            );
        }
        days.push(TradingDay { date, closes });
        date = next_weekday(date);
    }
    Ok(SyntheticMarket {
        bars: BarSeries {
            instrument: spec.instrument.clone(),
            days,
        },
        states,
        returns,
        input,
    })
}

fn next_weekday(d: chrono::NaiveDate) -> chrono::NaiveDate {
    use chrono::{Datelike, Weekday};
    let mut n = d.succ_opt().unwrap();
    while matches!(n.weekday(), Weekday::Sat | Weekday::Sun) {
        n = n.succ_opt().unwrap();
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::TrendGrid;

    fn sticky(beta: f64) -> HmmParams {
        HmmParams::new(
            vec![vec![beta, 1.0 - beta], vec![1.0 - beta, beta]],
            vec![0.5, 0.5],
            vec![-2e-4, 2e-4],
            vec![1e-7, 1e-7],
            TrendGrid::with_steps(2.5e-4, 8).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn mean_run_length_is_geometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, s) = simulate_returns(&sticky(0.99), 400_000, &mut rng);
        let runs = 1 + s.windows(2).filter(|w| w[0] != w[1]).count();
        let mean = s.len() as f64 / runs as f64;
        assert!((mean - 100.0).abs() < 10.0, "{mean}");
    }

    #[test]
    fn returns_lie_on_the_grid() {
        let p = sticky(0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, _) = simulate_returns(&p, 1000, &mut rng);
        assert!(r.iter().all(|&v| p.grid().values().contains(&v)));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SyntheticSpec {
            params: sticky(0.95),
            days: 2,
            start_price: 1300.0,
            instrument: Instrument::default(),
            seed: 9,
            input: None,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.bars, b.bars);
        assert_eq!(a.states, b.states);
        assert_eq!(a.bars.days.len(), 2);
        assert!(a.bars.days.iter().all(|d| d.closes.len() == 856));
        assert_eq!(a.bars.days[1].closes[0], a.bars.days[0].closes[855]);
        let q = |p: f64| (p / 0.25 - (p / 0.25).round()).abs() < 1e-9;
        assert!(a.bars.days.iter().flat_map(|d| &d.closes).all(|&p| q(p)));
    }

    #[test]
    fn input_switching_uses_the_bucket_regime() {
        let up = HmmParams::new(
            vec![vec![1.0]],
            vec![1.0],
            vec![5e-4],
            vec![1e-7],
            TrendGrid::with_steps(2.5e-4, 8).unwrap(),
        )
        .unwrap();
        let down = HmmParams::new(
            vec![vec![1.0]],
            vec![1.0],
            vec![-5e-4],
            vec![1e-7],
            TrendGrid::with_steps(2.5e-4, 8).unwrap(),
        )
        .unwrap();
        let dep = InputDependence {
            process: InputProcess::Seasonal,
            thresholds: vec![400.0],
            regimes: vec![up, down],
        };
        let x: Vec<f64> = (0..855).map(|t| (t + 2) as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (r, _) = simulate_input_returns(&dep, &x, &mut rng).unwrap();
        let m1: f64 = r[..398].iter().sum::<f64>() / 398.0;
        let m2: f64 = r[398..].iter().sum::<f64>() / (855.0 - 398.0);
        assert!(m1 > 0.0 && m2 < 0.0);
    }
}
