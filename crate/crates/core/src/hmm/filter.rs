use serde::{Deserialize, Serialize};

use super::params::HmmParams;
use crate::error::{Error, Result};

/// Filtering and one-step predictive distributions after observing `t + 1` returns.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// `ω_{t|t}`
    pub omega_filt: Vec<f64>,
    /// `ω_{t|t−1}`
    pub omega_pred: Vec<f64>,
    /// Zero-based index of the last observation folded in.
    pub t: usize,
}

/// Map from a predicted return to a position in `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TransferFunction {
    #[default]
    Sign,
    /// `clamp(scale · Δŷ, −1, 1)`
    LinearClip { scale: f64 },
    /// `Δŷ` itself, clamped to `[−1, 1]`.
    Identity,
}

impl TransferFunction {
    pub fn apply(&self, prediction: f64) -> f64 {
        match *self {
            TransferFunction::Sign => {
                if prediction > 0.0 {
                    1.0
                } else if prediction < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            TransferFunction::LinearClip { scale } => (scale * prediction).clamp(-1.0, 1.0),
            TransferFunction::Identity => prediction.clamp(-1.0, 1.0),
        }
    }
}

/// Position weights in `[−1, 1]`, aligned index-for-index with a return series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignalSeries {
    values: Vec<f64>,
}

impl SignalSeries {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !(v.abs() <= 1.0)) {
            return Err(Error::input(format!(
                "signal[{i}] = {} outside [-1, 1]",
                values[i]
            )));
        }
        Ok(SignalSeries { values })
    }

    pub fn constant(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
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
}

fn grid_index(params: &HmmParams, dy: f64, t: usize) -> Result<usize> {
    params
        .grid()
        .snap(dy)
        .ok_or(Error::DegenerateLikelihood { t })
}

/// Bayes update of `pred` with the observation at `t`, in log space.
/// Returns the filtering distribution and `log p(Δy_t | Δy_{1:t−1})`.
fn update(pred: &[f64], params: &HmmParams, dy: f64, t: usize) -> Result<(Vec<f64>, f64)> {
    let g = grid_index(params, dy, t)?;
    let mut w: Vec<f64> = pred
        .iter()
        .enumerate()
        .map(|(k, &p)| p.ln() + params.log_emission(k, g))
        .collect();
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateLikelihood { t });
    }
    let norm = m + w.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    w.iter_mut().for_each(|x| *x = (*x - norm).exp());
    Ok((w, norm))
}

/// `ω_{t|t−1,k} = Σ_{k′} a_{k′,k} ω_{t−1|t−1,k′}`
fn propagate(filt: &[f64], params: &HmmParams) -> Vec<f64> {
    let k = params.k();
    let mut pred = vec![0.0; k];
    for (from, &w) in filt.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (to, a) in params.transition_row(from).iter().enumerate() {
            pred[to] += a * w;
        }
    }
    pred
}

pub fn init_filter(params: &HmmParams, dy1: f64) -> Result<FilterState> {
    let (filt, _) = update(params.initial(), params, dy1, 0)?;
    Ok(FilterState {
        omega_filt: filt,
        omega_pred: params.initial().to_vec(),
        t: 0,
    })
}

pub fn filter_step(prev: &FilterState, params: &HmmParams, dy: f64) -> Result<FilterState> {
    if prev.omega_filt.len() != params.k() {
        return Err(Error::param(
            "filter state does not match parameter state count",
        ));
    }
    let t = prev.t + 1;
    let pred = propagate(&prev.omega_filt, params);
    let (filt, _) = update(&pred, params, dy, t)?;
    Ok(FilterState {
        omega_filt: filt,
        omega_pred: pred,
        t,
    })
}

/// `Δŷ_t = Σ_k ω_{t|t−1,k} μ*_k`
pub fn predict_return(state: &FilterState, params: &HmmParams) -> f64 {
    expected_return(&state.omega_pred, params)
}

fn expected_return(pred: &[f64], params: &HmmParams) -> f64 {
    pred.iter()
        .zip(params.discretized_means())
        .map(|(w, m)| w * m)
        .sum()
}

/// `log p(Δy_{1:T} | Θ)` from the forward normalizers.
pub fn log_likelihood(returns: &[f64], params: &HmmParams) -> Result<f64> {
    let (first, rest) = returns
        .split_first()
        .ok_or_else(|| Error::input("empty return series"))?;
    let (mut filt, mut ll) = update(params.initial(), params, *first, 0)?;
    for (i, &dy) in rest.iter().enumerate() {
        let pred = propagate(&filt, params);
        let (f, c) = update(&pred, params, dy, i + 1)?;
        filt = f;
        ll += c;
    }
    Ok(ll)
}

/// Forecast-then-update loop. `signal[t]` uses only `Δy_{1:t−1}`; `signal[0]`
/// is the forecast under `π`.
pub fn run_hmm_signal(
    returns: &[f64],
    params: &HmmParams,
    tf: TransferFunction,
) -> Result<SignalSeries> {
    run_signal_with(returns, tf, |_| params)
}

/// Shared loop for the plain and input-conditioned filters; `params_at(t)`
/// selects the parameter set active at `t`.
pub(crate) fn run_signal_with<'a, F>(
    returns: &[f64],
    tf: TransferFunction,
    mut params_at: F,
) -> Result<SignalSeries>
where
    F: FnMut(usize) -> &'a HmmParams,
{
    if returns.is_empty() {
        return Err(Error::input("empty return series"));
    }
    let mut out = Vec::with_capacity(returns.len());
    let mut filt: Option<Vec<f64>> = None;
    for (t, &dy) in returns.iter().enumerate() {
        let params = params_at(t);
        let pred = match &filt {
            None => params.initial().to_vec(),
            Some(f) => {
                if f.len() != params.k() {
                    return Err(Error::param("state count changed between parameter sets"));
                }
                propagate(f, params)
            }
        };
        out.push(tf.apply(expected_return(&pred, params)));
        filt = Some(update(&pred, params, dy, t)?.0);
    }
    SignalSeries::new(out)
}
