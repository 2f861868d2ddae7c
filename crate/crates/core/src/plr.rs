//! Default-case learning: change points from piecewise linear regression on
//! prices, and the sticky default transition matrix.
//!
//! Segmentation is recursive binary splitting. For each candidate segment
//! the split minimizing the two-line residual sum of squares is tested with a
//! t-statistic on the slope difference; splits are kept while the two-sided
//! p-value is below the significance level. A final pass merges neighbours
//! whose slopes are no longer significantly different.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::hmm::{HmmParams, TrendGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlrConfig {
    pub alpha_level: f64,
    pub min_segment: usize,
}

impl Default for PlrConfig {
    fn default() -> Self {
        PlrConfig {
            alpha_level: 0.05,
            min_segment: 10,
        }
    }
}

/// One OLS trend line over `prices[start..end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Price units per step.
    pub slope: f64,
    pub intercept: f64,
    /// Maximum-likelihood residual variance `Σε²/n`.
    pub sigma2: f64,
    pub t_stat: f64,
    pub mean_price: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Slope expressed as a log-return per step (slope over mean price).
    pub fn return_slope(&self) -> f64 {
        self.slope / self.mean_price
    }

    fn fitted(&self, t: usize) -> f64 {
        self.intercept + self.slope * (t - self.start) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// First index of every segment after the first.
    pub change_points: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl Segmentation {
    /// Regression residuals, concatenated in time order.
    pub fn residuals(&self, prices: &[f64]) -> Vec<f64> {
        self.segments
            .iter()
            .flat_map(|s| (s.start..s.end).map(move |t| (t, s)))
            .map(|(t, s)| prices[t] - s.fitted(t))
            .collect()
    }
}

/// Prefix sums for O(1) segment regressions with `x = 0, 1, …` local to each segment.
struct Prefix {
    y: Vec<f64>,
    ty: Vec<f64>,
    yy: Vec<f64>,
    noise_floor: f64,
}

struct LineFit {
    slope: f64,
    intercept: f64,
    sse: f64,
    sxx: f64,
}

impl Prefix {
    fn new(y: &[f64]) -> Self {
        let n = y.len();
        let (mut a, mut b, mut c) = (vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]);
        for (t, &v) in y.iter().enumerate() {
            a[t + 1] = a[t] + v;
            b[t + 1] = b[t] + t as f64 * v;
            c[t + 1] = c[t] + v * v;
        }
        let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        Prefix {
            y: a,
            ty: b,
            yy: c,
            noise_floor: (1e-10 * scale).powi(2),
        }
    }

    fn fit(&self, start: usize, end: usize) -> LineFit {
        let n = (end - start) as f64;
        let sy = self.y[end] - self.y[start];
        // Σ (t − start) y_t
        let sxy_local = (self.ty[end] - self.ty[start]) - start as f64 * sy;
        let syy = self.yy[end] - self.yy[start];
        let xbar = (n - 1.0) / 2.0;
        let sxx = n * (n * n - 1.0) / 12.0;
        let sxy = sxy_local - xbar * sy;
        let syy_c = syy - sy * sy / n;
        let slope = sxy / sxx;
        let intercept = sy / n - slope * xbar;
        let sse = (syy_c - slope * sxy).max(0.0);
        LineFit {
            slope,
            intercept,
            sse,
            sxx,
        }
    }
}

fn slope_difference_p_value(left: &LineFit, right: &LineFit, n: usize, floor: f64) -> f64 {
    let df = n as f64 - 4.0;
    let s2 = ((left.sse + right.sse) / df).max(floor);
    let se = (s2 * (1.0 / left.sxx + 1.0 / right.sxx)).sqrt();
    let t = (left.slope - right.slope) / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

pub fn plr_segment(prices: &[f64], alpha_level: f64) -> Result<Segmentation> {
    plr_segment_with(
        prices,
        &PlrConfig {
            alpha_level,
            ..PlrConfig::default()
        },
    )
}

pub fn plr_segment_with(prices: &[f64], cfg: &PlrConfig) -> Result<Segmentation> {
    let min = cfg.min_segment.max(3);
    if prices.len() < 2 * min {
        return Err(Error::input(format!(
            "series of length {} is shorter than twice the minimum segment length {min}",
            prices.len()
        )));
    }
    if !(cfg.alpha_level > 0.0 && cfg.alpha_level < 1.0) {
        return Err(Error::param("alpha_level must be in (0, 1)"));
    }
    if prices.iter().any(|p| !p.is_finite()) {
        return Err(Error::input("non-finite price"));
    }
    let level = prices.iter().sum::<f64>() / prices.len() as f64;
    let centered: Vec<f64> = prices.iter().map(|p| p - level).collect();
    let pre = Prefix::new(&centered);

    let mut leaves = Vec::new();
    let mut stack = vec![(0usize, prices.len())];
    while let Some((a, b)) = stack.pop() {
        let n = b - a;
        let mut best: Option<(usize, f64)> = None;
        if n >= 2 * min {
            for s in a + min..=b - min {
                let sse = pre.fit(a, s).sse + pre.fit(s, b).sse;
                if best.is_none_or(|(_, e)| sse < e) {
                    best = Some((s, sse));
                }
            }
        }
        let split = best.filter(|&(s, _)| {
            let p = slope_difference_p_value(&pre.fit(a, s), &pre.fit(s, b), n, pre.noise_floor);
            p < cfg.alpha_level
        });
        match split {
            Some((s, _)) => {
                stack.push((s, b));
                stack.push((a, s));
            }
            None => leaves.push((a, b)),
        }
    }
    leaves.sort_unstable();

    // Binary splitting can leave a boundary whose neighbours ended up with
    // indistinguishable slopes; merge the weakest such pair until every
    // remaining change point is significant against its final neighbours.
    loop {
        let weakest = leaves
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (a, s, b) = (w[0].0, w[1].0, w[1].1);
                (
                    i,
                    slope_difference_p_value(
                        &pre.fit(a, s),
                        &pre.fit(s, b),
                        b - a,
                        pre.noise_floor,
                    ),
                )
            })
            .max_by(|x, y| x.1.total_cmp(&y.1));
        match weakest {
            Some((i, p)) if p >= cfg.alpha_level => {
                leaves[i].1 = leaves[i + 1].1;
                leaves.remove(i + 1);
            }
            _ => break,
        }
    }

    let segments: Vec<Segment> = leaves
        .iter()
        .map(|&(a, b)| {
            let f = pre.fit(a, b);
            let n = (b - a) as f64;
            let se = ((f.sse / (n - 2.0)).max(pre.noise_floor) / f.sxx).sqrt();
            Segment {
                start: a,
                end: b,
                slope: f.slope,
                intercept: f.intercept + level,
                sigma2: f.sse / n,
                t_stat: f.slope / se,
                mean_price: (pre.y[b] - pre.y[a]) / n + level,
            }
        })
        .collect();
    let change_points = segments.iter().skip(1).map(|s| s.start).collect();
    Ok(Segmentation {
        change_points,
        segments,
    })
}

/// `DW = Σ_{t≥2}(ε_t − ε_{t−1})² / Σ ε_t²`
pub fn durbin_watson(residuals: &[f64]) -> Result<f64> {
    if residuals.len() < 2 {
        return Err(Error::input("Durbin-Watson needs at least two residuals"));
    }
    let den: f64 = residuals.iter().map(|e| e * e).sum();
    if !(den > 0.0) {
        return Err(Error::input("residuals are all zero"));
    }
    let num: f64 = residuals.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(num / den)
}

/// Sticky default model: `a_kk = β`, `a_kj = (1−β)/(K−1)`, uniform `π`, and
/// emissions from a `K`-means clustering of segment return slopes.
pub fn default_theta(
    k: usize,
    beta: f64,
    grid: &TrendGrid,
    seg: &Segmentation,
) -> Result<HmmParams> {
    if k < 2 {
        return Err(Error::param("default model needs K >= 2"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::param(format!("beta must be in (0, 1), got {beta}")));
    }
    let slopes: Vec<f64> = seg.segments.iter().map(Segment::return_slope).collect();
    let mut distinct = slopes.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if seg.segments.len() < k || distinct.len() < k {
        return Err(Error::InsufficientSegments {
            found: distinct.len().min(seg.segments.len()),
            needed: k,
        });
    }
    let weights: Vec<f64> = seg.segments.iter().map(|s| s.len() as f64).collect();
    let labels = kmeans_1d(&slopes, &weights, k);

    let floor = grid.variance_floor();
    let mut states: Vec<(f64, f64)> = (0..k)
        .map(|c| {
            let (mut w, mut m, mut sse, mut n) = (0.0, 0.0, 0.0, 0.0);
            for (i, s) in seg
                .segments
                .iter()
                .enumerate()
                .filter(|(i, _)| labels[*i] == c)
            {
                w += weights[i];
                m += weights[i] * slopes[i];
                // residual variance in return units
                sse += s.sigma2 * s.len() as f64 / (s.mean_price * s.mean_price);
                n += s.len() as f64;
            }
            (m / w, (sse / n).max(floor))
        })
        .collect();
    states.sort_by(|a, b| a.0.total_cmp(&b.0));

    let off = (1.0 - beta) / (k - 1) as f64;
    let a = (0..k)
        .map(|i| (0..k).map(|j| if i == j { beta } else { off }).collect())
        .collect();
    HmmParams::new(
        a,
        vec![1.0 / k as f64; k],
        states.iter().map(|s| s.0).collect(),
        states.iter().map(|s| s.1).collect(),
        grid.clone(),
    )
}

/// Weighted Lloyd iterations from quantile seeds; deterministic. Every
/// cluster is non-empty when there are at least `k` distinct values.
fn kmeans_1d(x: &[f64], w: &[f64], k: usize) -> Vec<usize> {
    let mut sorted: Vec<f64> = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut centers: Vec<f64> = (0..k)
        .map(|c| sorted[((c as f64 + 0.5) / k as f64 * sorted.len() as f64) as usize])
        .collect();
    let mut labels = vec![0; x.len()];
    for _ in 0..100 {
        let new: Vec<usize> = x
            .iter()
            .map(|&v| {
                (0..k)
                    .min_by(|&a, &b| (v - centers[a]).abs().total_cmp(&(v - centers[b]).abs()))
                    .unwrap()
            })
            .collect();
        let mut next = centers.clone();
        for (c, center) in next.iter_mut().enumerate() {
            let (mut sw, mut sx) = (0.0, 0.0);
            for i in (0..x.len()).filter(|&i| new[i] == c) {
                sw += w[i];
                sx += w[i] * x[i];
            }
            if sw > 0.0 {
                *center = sx / sw;
            }
        }
        let done = new == labels && next == centers;
        labels = new;
        centers = next;
        if done {
            break;
        }
    }
    // An empty cluster takes the point farthest from its own center.
    for c in 0..k {
        if !labels.contains(&c) {
            let far = (0..x.len())
                .filter(|&i| labels.iter().filter(|&&l| l == labels[i]).count() > 1)
                .max_by(|&a, &b| {
                    (x[a] - centers[labels[a]])
                        .abs()
                        .total_cmp(&(x[b] - centers[labels[b]]).abs())
                });
            if let Some(i) = far {
                labels[i] = c;
            }
        }
    }
    labels
}
