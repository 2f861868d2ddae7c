//! Input-output HMM: one parameter set per bucket of an exogenous input,
//! buckets delimited by the roots of a fitted spline predictor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baum_welch::{baum_welch, EmConfig, MIN_OBS_PER_STATE};
use crate::error::{Error, Result};
use crate::hmm::{run_signal_with, HmmParams, SignalSeries, TransferFunction, TrendGrid};
use crate::side_info::{fit_zero_mean_spline, PredictorKind, SplinePredictor};

/// Intervals of the predictor domain separated by spline roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketPartition {
    pub domain: (f64, f64),
    pub roots: Vec<f64>,
    /// Sign of the spline on each bucket (`0` for a single-bucket partition).
    pub signs: Vec<i8>,
}

impl BucketPartition {
    pub fn single(domain: (f64, f64)) -> Self {
        BucketPartition {
            domain,
            roots: Vec::new(),
            signs: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.roots.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Bucket containing `x`; values outside the domain fall in the end buckets.
    pub fn bucket(&self, x: f64) -> usize {
        self.roots.partition_point(|&r| r <= x)
    }
}

const ROOT_SCAN_POINTS: usize = 4096;
const ROOT_TOLERANCE: f64 = 1e-10;

/// Roots by sign-change bracketing on a dense grid, refined by bisection.
pub fn spline_roots(spline: &SplinePredictor) -> Result<BucketPartition> {
    let max = spline.max_abs(ROOT_SCAN_POINTS);
    if max < 1e-12 {
        return Err(Error::DegenerateSpline(max));
    }
    let (lo, hi) = spline.domain();
    let xs: Vec<f64> = (0..=ROOT_SCAN_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / ROOT_SCAN_POINTS as f64)
        .collect();
    let vals: Vec<f64> = xs.iter().map(|&x| spline.eval(x)).collect();
    let eps = 1e-12 * max;
    let sign = |v: f64| {
        if v > eps {
            1i8
        } else if v < -eps {
            -1
        } else {
            0
        }
    };

    let mut roots = Vec::new();
    let mut last: Option<(usize, i8)> = None;
    for (i, &v) in vals.iter().enumerate() {
        let s = sign(v);
        if s == 0 {
            continue;
        }
        if let Some((j, prev)) = last {
            if prev != s {
                let (mut a, mut b) = (xs[j], xs[i]);
                while b - a > ROOT_TOLERANCE {
                    let m = 0.5 * (a + b);
                    if sign(spline.eval(m)) == prev {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                roots.push(0.5 * (a + b));
            }
        }
        last = Some((i, s));
    }
    let mut edges = vec![lo];
    edges.extend(&roots);
    edges.push(hi);
    let signs = edges
        .windows(2)
        .map(|w| sign(spline.eval(0.5 * (w[0] + w[1]))))
        .collect();
    Ok(BucketPartition {
        domain: (lo, hi),
        roots,
        signs,
    })
}

/// Partition from the zero-mean spline of `y` on `x` over the pairs where both
/// are defined. An input that is constant there, or a spline that vanishes,
/// gives a single bucket.
pub fn fit_partition(
    x: &[Option<f64>],
    y: &[Option<f64>],
    knots: usize,
) -> Result<BucketPartition> {
    if x.len() != y.len() {
        return Err(Error::input("predictor and response are not aligned"));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    let Some(&first) = xs.first() else {
        return Err(Error::InsufficientData(
            "no defined predictor-response pairs".into(),
        ));
    };
    if xs.iter().all(|&v| v == first) {
        return Ok(BucketPartition::single((first, first)));
    }
    let spline = fit_zero_mean_spline(&xs, &ys, knots)?;
    match spline_roots(&spline) {
        Err(Error::DegenerateSpline(_)) => Ok(BucketPartition::single(spline.domain())),
        other => other,
    }
}

/// Returns split by the bucket of their input, time order preserved.
/// Observations with an undefined input are left out.
pub fn bucket_data(
    returns: &[f64],
    x: &[Option<f64>],
    partition: &BucketPartition,
) -> Result<Vec<Vec<f64>>> {
    if returns.len() != x.len() {
        return Err(Error::input("returns and predictor are not aligned"));
    }
    let mut out = vec![Vec::new(); partition.len()];
    for (&r, xt) in returns.iter().zip(x) {
        if let Some(v) = xt {
            out[partition.bucket(*v)].push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IohmmParams {
    pub partition: BucketPartition,
    pub theta: Vec<HmmParams>,
    /// Fit on all data; used where the input is undefined.
    pub pooled: HmmParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PredictorKind>,
}

impl IohmmParams {
    pub fn new(
        partition: BucketPartition,
        theta: Vec<HmmParams>,
        pooled: HmmParams,
    ) -> Result<Self> {
        if theta.len() != partition.len() {
            return Err(Error::param("one parameter set per bucket is required"));
        }
        if theta
            .iter()
            .any(|p| p.k() != pooled.k() || p.grid() != pooled.grid())
        {
            return Err(Error::param("bucket parameters must share K and the grid"));
        }
        Ok(IohmmParams {
            partition,
            theta,
            pooled,
            kind: None,
        })
    }

    pub fn params_for(&self, x: Option<f64>) -> &HmmParams {
        match x {
            Some(v) => &self.theta[self.partition.bucket(v)],
            None => &self.pooled,
        }
    }
}

/// Baum-Welch per bucket. Buckets with fewer than `10·K` observations
/// inherit the pooled fit.
pub fn iohmm_learn(
    returns: &[f64],
    x: &[Option<f64>],
    partition: &BucketPartition,
    grid: &TrendGrid,
    k: usize,
    cfg: &EmConfig,
) -> Result<IohmmParams> {
    let buckets = bucket_data(returns, x, partition)?;
    let need = MIN_OBS_PER_STATE * k;
    if buckets.iter().all(|b| b.len() < need) {
        return Err(Error::InsufficientData(format!(
            "every bucket has fewer than {need} observations"
        )));
    }
    let pooled_data: Vec<f64> = buckets.iter().flatten().copied().collect();
    let single = buckets.len() == 1;
    let pooled = baum_welch(&pooled_data, grid, k, cfg)?.params;
    let theta = buckets
        .par_iter()
        .enumerate()
        .map(|(r, data)| {
            if single {
                Ok(pooled.clone())
            } else if data.len() < need {
                log::warn!(
                    "bucket {r} has {} observations; using the pooled fit",
                    data.len()
                );
                Ok(pooled.clone())
            } else {
                Ok(baum_welch(data, grid, k, cfg)?.params)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    IohmmParams::new(partition.clone(), theta, pooled)
}

/// Forecast-then-update loop with the parameter set looked up from `x_t`.
/// The filter state carries over when the bucket changes.
pub fn iohmm_signal(
    returns: &[f64],
    x: &[Option<f64>],
    params: &IohmmParams,
    tf: TransferFunction,
) -> Result<SignalSeries> {
    if returns.len() != x.len() {
        return Err(Error::input("returns and predictor are not aligned"));
    }
    run_signal_with(returns, tf, |t| params.params_for(x[t]))
}
