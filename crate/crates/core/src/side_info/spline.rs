use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    VolatilityRatio,
    Seasonality,
}

impl PredictorKind {
    pub fn default_knots(self) -> usize {
        match self {
            PredictorKind::VolatilityRatio => 6,
            PredictorKind::Seasonality => 10,
        }
    }
}

/// Clamped cubic B-spline with uniform breakpoints and zero integral over its domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplinePredictor {
    pub kind: Option<PredictorKind>,
    /// Breakpoints including both domain ends.
    breakpoints: Vec<f64>,
    coefficients: Vec<f64>,
    /// Day range `[first, last)` the fit used, when produced by a rolling fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<(usize, usize)>,
}

impl SplinePredictor {
    pub fn from_parts(breakpoints: Vec<f64>, coefficients: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 || coefficients.len() != breakpoints.len() + 2 {
            return Err(Error::SplineFit(
                "need b breakpoints and b + 2 coefficients".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::SplineFit(
                "breakpoints must be strictly increasing".into(),
            ));
        }
        Ok(SplinePredictor {
            kind: None,
            breakpoints,
            coefficients,
            window: None,
        })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.breakpoints[0], *self.breakpoints.last().unwrap())
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Value at `x`, clamped to the domain.
    pub fn eval(&self, x: f64) -> f64 {
        let (span, b) = basis(&self.breakpoints, x);
        (0..4).map(|i| b[i] * self.coefficients[span + i]).sum()
    }

    /// Exact integral over the domain from the coefficients.
    pub fn integral(&self) -> f64 {
        let t = full_knots(&self.breakpoints);
        self.coefficients
            .iter()
            .enumerate()
            .map(|(j, c)| c * (t[j + 4] - t[j]) / 4.0)
            .sum()
    }

    pub fn max_abs(&self, samples: usize) -> f64 {
        let (a, b) = self.domain();
        (0..=samples)
            .map(|i| self.eval(a + (b - a) * i as f64 / samples as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn full_knots(bp: &[f64]) -> Vec<f64> {
    let (a, b) = (bp[0], *bp.last().unwrap());
    let mut t = vec![a; 3];
    t.extend_from_slice(bp);
    t.extend([b; 3]);
    t
}

/// Span index `s` (basis functions `s..s+4` are active) and their values at `x`.
fn basis(bp: &[f64], x: f64) -> (usize, [f64; 4]) {
    let last = bp.len() - 1;
    let x = x.clamp(bp[0], bp[last]);
    let s = match bp.partition_point(|&b| b <= x) {
        0 => 0,
        p => (p - 1).min(last - 1),
    };
    let t = full_knots(bp);
    // Cox-de Boor on the knot span [t[s+3], t[s+4]).
    let i = s + 3;
    let mut n = [0.0; 4];
    let mut left = [0.0; 4];
    let mut right = [0.0; 4];
    n[0] = 1.0;
    for j in 1..4 {
        left[j] = x - t[i + 1 - j];
        right[j] = t[i + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    (s, n)
}

/// Least-squares cubic B-spline through `(x, y)` subject to a zero integral
/// over `[min x, max x]`. `knots` is the number of uniformly spaced
/// breakpoints including both ends.
///
/// The response is centered first, so a constant response fits the zero spline.
pub fn fit_zero_mean_spline(x: &[f64], y: &[f64], knots: usize) -> Result<SplinePredictor> {
    if x.len() != y.len() {
        return Err(Error::input("predictor and response lengths differ"));
    }
    if knots < 2 {
        return Err(Error::param("at least two knots are required"));
    }
    if x.len() < 10 * knots {
        return Err(Error::InsufficientData(format!(
            "{} samples for {knots} knots; need at least {}",
            x.len(),
            10 * knots
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite sample"));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::SplineFit("predictor has a degenerate domain".into()));
    }
    let bp: Vec<f64> = (0..knots)
        .map(|i| {
            if i + 1 == knots {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (knots - 1) as f64
            }
        })
        .collect();

    let mut counts = vec![0usize; knots - 1];
    for &xi in x {
        counts[basis(&bp, xi).0] += 1;
    }
    if let Some(span) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyKnotSpan {
            span,
            lo: bp[span],
            hi: bp[span + 1],
        });
    }

    let nb = knots + 2;
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut gram = DMatrix::<f64>::zeros(nb, nb);
    let mut rhs = DVector::<f64>::zeros(nb);
    for (&xi, &yi) in x.iter().zip(y) {
        let (s, b) = basis(&bp, xi);
        for p in 0..4 {
            rhs[s + p] += b[p] * (yi - y_mean);
            for q in 0..4 {
                gram[(s + p, s + q)] += b[p] * b[q];
            }
        }
    }

    // Null space of the integral functional via one Householder reflection.
    let t = full_knots(&bp);
    let w = DVector::from_iterator(nb, (0..nb).map(|j| (t[j + 4] - t[j]) / 4.0));
    let mut v = w.clone();
    v[0] += w[0].signum() * w.norm();
    let v = &v / v.norm();
    let h = DMatrix::<f64>::identity(nb, nb) - 2.0 * &v * v.transpose();
    let null = h.columns(1, nb - 1).into_owned();

    let reduced = null.transpose() * &gram * &null;
    let reduced_rhs = null.transpose() * &rhs;
    let chol = reduced
        .cholesky()
        .ok_or_else(|| Error::SplineFit("design matrix is rank deficient".into()))?;
    let z = chol.solve(&reduced_rhs);
    let c = &null * z;
    SplinePredictor::from_parts(bp, c.iter().copied().collect())
}
