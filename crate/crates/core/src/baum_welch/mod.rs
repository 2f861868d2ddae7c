//! Maximum-likelihood learning by expectation maximization, plus model-order
//! selection with penalized likelihood.

mod forward_backward;
mod mstep;

use std::io::Write;
use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{HmmParams, TrendGrid};
use crate::math::sample_variance;
use crate::plr::{default_theta, Segmentation};

pub(crate) use forward_backward::forward_backward_indexed;
pub use forward_backward::{forward_backward, ForwardBackward};
use mstep::{fit_emissions, StateStats};

/// Starting point for the EM iterations.
#[derive(Debug, Clone, Default)]
pub enum EmInit {
    /// Sticky transitions, uniform initial law, pooled variance, and means at
    /// quantiles of a short moving average of the data.
    #[default]
    Default,
    FromParams(HmmParams),
    /// Default model built from a price segmentation with self-transition `beta`.
    FromSegmentation {
        segmentation: Segmentation,
        beta: f64,
    },
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop when the relative log-likelihood gain falls below this.
    pub tolerance: f64,
    /// Lower bound on state variances; never below the grid floor `α²/2`.
    pub variance_floor: Option<f64>,
    pub tied_variances: bool,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 200,
            tolerance: 1e-6,
            variance_floor: None,
            tied_variances: false,
            init: EmInit::Default,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Log-likelihood of each evaluated parameter set, in order.
    pub logliks: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: HmmParams,
    pub trace: EmTrace,
}

impl EmFit {
    pub fn loglik(&self) -> f64 {
        *self.trace.logliks.last().expect("at least one E-step")
    }
}

/// Minimum observations per state.
pub const MIN_OBS_PER_STATE: usize = 10;

pub fn baum_welch(data: &[f64], grid: &TrendGrid, k: usize, cfg: &EmConfig) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::param("K must be positive"));
    }
    if data.len() < MIN_OBS_PER_STATE * k {
        return Err(Error::InsufficientData(format!(
            "{} observations for K = {k}; need at least {}",
            data.len(),
            MIN_OBS_PER_STATE * k
        )));
    }
    let idx: Vec<usize> = data
        .iter()
        .enumerate()
        .map(|(t, &dy)| grid.snap(dy).ok_or(Error::DegenerateLikelihood { t }))
        .collect::<Result<_>>()?;
    let mut distinct = idx.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::DegenerateFit(format!(
            "{} distinct grid values cannot identify {k} states",
            distinct.len()
        )));
    }
    let floor = cfg.variance_floor.unwrap_or(0.0).max(grid.variance_floor());

    let mut params = match &cfg.init {
        EmInit::Default => default_start(data, grid, k, floor)?,
        EmInit::FromParams(p) => {
            if p.k() != k || p.grid() != grid {
                return Err(Error::param(
                    "initial parameters do not match K or the grid",
                ));
            }
            p.clone()
        }
        EmInit::FromSegmentation { segmentation, beta } => {
            default_theta(k, *beta, grid, segmentation)?
        }
    };

    let mut logliks: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let fb = forward_backward_indexed(&idx, &params)?;
        let ll = fb.loglik;
        if let Some(&prev) = logliks.last() {
            let gain: f64 = ll - prev;
            if gain.abs() <= cfg.tolerance * prev.abs().max(1.0) {
                logliks.push(ll);
                converged = true;
                break;
            }
        }
        logliks.push(ll);
        if iterations >= cfg.max_iterations {
            break;
        }
        params = m_step(&fb, &idx, &params, floor, cfg.tied_variances)?;
        iterations += 1;
    }
    log::debug!(
        "baum-welch K={k}: {iterations} iterations, loglik {}",
        logliks.last().unwrap()
    );
    Ok(EmFit {
        params,
        trace: EmTrace {
            logliks,
            iterations,
            converged,
        },
    })
}

/// Window of the moving average whose quantiles seed the state means.
const START_WINDOW: usize = 20;

fn default_start(data: &[f64], grid: &TrendGrid, k: usize, floor: f64) -> Result<HmmParams> {
    // Quantiles of raw returns sit in the noise tails; a short moving average
    // spreads the starting means over plausible trend levels instead.
    let w = START_WINDOW.min(data.len());
    let mut smoothed: Vec<f64> = data
        .windows(w)
        .map(|x| x.iter().sum::<f64>() / w as f64)
        .collect();
    smoothed.sort_by(f64::total_cmp);
    let means: Vec<f64> = (0..k)
        .map(|j| smoothed[((j as f64 + 0.5) / k as f64 * smoothed.len() as f64) as usize])
        .collect();
    let var = if data.len() > 1 {
        sample_variance(data)
    } else {
        0.0
    };
    let var = var.max(floor);
    let trans = if k == 1 {
        vec![vec![1.0]]
    } else {
        let stay = 0.99;
        let off = (1.0 - stay) / (k - 1) as f64;
        (0..k)
            .map(|i| (0..k).map(|j| if i == j { stay } else { off }).collect())
            .collect()
    };
    HmmParams::new(
        trans,
        vec![1.0 / k as f64; k],
        means,
        vec![var; k],
        grid.clone(),
    )
}

fn m_step(
    fb: &ForwardBackward,
    idx: &[usize],
    params: &HmmParams,
    floor: f64,
    tied: bool,
) -> Result<HmmParams> {
    let k = params.k();
    let g = params.grid().len();
    let initial = fb.gamma_row(0).to_vec();

    let mut trans = params.transition_flat().to_vec();
    for (i, row) in fb.transition_counts.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            for (dst, c) in trans[i * k..(i + 1) * k].iter_mut().zip(row) {
                *dst = c / s;
            }
        }
    }

    let mut weights = vec![0.0; k * g];
    for (t, &gi) in idx.iter().enumerate() {
        for (s, &w) in fb.gamma_row(t).iter().enumerate() {
            weights[s * g + gi] += w;
        }
    }
    let stats: Vec<StateStats> = weights
        .chunks(g)
        .map(|w| StateStats { weights: w })
        .collect();
    let current: Vec<(f64, f64)> = params
        .means()
        .iter()
        .copied()
        .zip(params.variances().iter().copied())
        .collect();
    let fitted = fit_emissions(params.grid(), &stats, &current, floor, tied);

    HmmParams::from_flat(
        trans,
        initial,
        fitted.iter().map(|p| p.0).collect(),
        fitted.iter().map(|p| p.1).collect(),
        params.grid().clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    #[default]
    Bic,
}

/// Number of free parameters: transitions, initial law, and emissions.
/// Tied variances contribute one shared parameter.
pub fn free_parameters(k: usize, tied: bool) -> usize {
    let emissions = if tied { k + 1 } else { 2 * k };
    k * (k - 1) + (k - 1) + emissions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub loglik: f64,
    /// `2ℓ − 2p`; larger is better.
    pub aic: f64,
    /// `2ℓ − p ln T`; larger is better.
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct KSelection {
    pub scores: Vec<KScore>,
    /// Candidate orders that failed to fit, with the reason.
    pub failures: Vec<(usize, String)>,
    pub best_k: usize,
    pub best: EmFit,
}

pub fn select_k_penalized(
    data: &[f64],
    grid: &TrendGrid,
    ks: RangeInclusive<usize>,
    criterion: Criterion,
    cfg: &EmConfig,
) -> Result<KSelection> {
    let ks: Vec<usize> = ks.collect();
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::param(
            "K range must be non-empty and start at 1 or more",
        ));
    }
    let n = data.len() as f64;
    let results: Vec<(usize, Result<EmFit>)> = ks
        .par_iter()
        .map(|&k| (k, baum_welch(data, grid, k, cfg)))
        .collect();

    let mut scores = Vec::new();
    let mut failures = Vec::new();
    let mut best: Option<(f64, usize, EmFit)> = None;
    for (k, res) in results {
        match res {
            Ok(fit) => {
                let ll = fit.loglik();
                let p = free_parameters(k, cfg.tied_variances) as f64;
                let score = KScore {
                    k,
                    loglik: ll,
                    aic: 2.0 * ll - 2.0 * p,
                    bic: 2.0 * ll - p * n.ln(),
                    iterations: fit.trace.iterations,
                    converged: fit.trace.converged,
                };
                let value = match criterion {
                    Criterion::Aic => score.aic,
                    Criterion::Bic => score.bic,
                };
                if best.as_ref().is_none_or(|b| value > b.0) {
                    best = Some((value, k, fit));
                }
                scores.push(score);
            }
            Err(e) => {
                log::warn!("K = {k} failed: {e}");
                failures.push((k, e.to_string()));
            }
        }
    }
    let (_, best_k, best) = best
        .ok_or_else(|| Error::DegenerateFit(format!("every candidate K failed: {failures:?}")))?;
    Ok(KSelection {
        scores,
        failures,
        best_k,
        best,
    })
}

/// One row per fitted K: `K,loglik,AIC,BIC,iterations,converged`.
pub fn write_scores_csv<W: Write>(scores: &[KScore], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["K", "loglik", "AIC", "BIC", "iterations", "converged"])?;
    for s in scores {
        w.write_record([
            s.k.to_string(),
            s.loglik.to_string(),
            s.aic.to_string(),
            s.bic.to_string(),
            s.iterations.to_string(),
            s.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
