//! Emission M-step for discretized Gaussians.
//!
//! On the grid `u ∈ {−n, …, n}` (returns in units of `α`) the emission pmf is
//! an exponential family with sufficient statistics `(u, u²)`:
//! `log φ(u) = θ₁u + θ₂u² − log Z(θ)`, `σ² = −α²/(2θ₂)`, `μ = α θ₁ σ²/α²`.
//! The expected complete-data log-likelihood is concave in `θ`, so the
//! maximizer is found by Newton's method. The variance floor `σ² ≥ α²/2`
//! becomes the half-space `θ₂ ≥ −1`; tied variances share one `θ₂`.

use nalgebra::{DMatrix, DVector};

use crate::hmm::TrendGrid;

/// Expected grid-occupancy weights for one state.
pub(crate) struct StateStats<'a> {
    pub weights: &'a [f64],
}

struct Moments {
    n: f64,
    m1: f64,
    m2: f64,
}

struct PmfMoments {
    log_z: f64,
    e1: f64,
    e2: f64,
    var1: f64,
    cov12: f64,
    var2: f64,
}

fn grid_units(grid: &TrendGrid) -> Vec<f64> {
    let n = (grid.len() / 2) as f64;
    (0..grid.len()).map(|i| i as f64 - n).collect()
}

fn pmf_moments(u: &[f64], t1: f64, t2: f64) -> PmfMoments {
    let m = u
        .iter()
        .map(|&x| t1 * x + t2 * x * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &x in u {
        let w = (t1 * x + t2 * x * x - m).exp();
        let x2 = x * x;
        z += w;
        s1 += w * x;
        s2 += w * x2;
        s3 += w * x2 * x;
        s4 += w * x2 * x2;
    }
    let (e1, e2, e3, e4) = (s1 / z, s2 / z, s3 / z, s4 / z);
    PmfMoments {
        log_z: m + z.ln(),
        e1,
        e2,
        var1: (e2 - e1 * e1).max(0.0),
        cov12: e3 - e1 * e2,
        var2: (e4 - e2 * e2).max(0.0),
    }
}

fn objective(u: &[f64], stats: &[Moments], t1: &[f64], t2: f64) -> f64 {
    stats
        .iter()
        .zip(t1)
        .map(|(s, &a)| a * s.m1 + t2 * s.m2 - s.n * pmf_moments(u, a, t2).log_z)
        .sum()
}

/// Maximize over `θ₁` for one state with `θ₂` fixed.
fn solve_theta1(u: &[f64], s: &Moments, t2: f64, mut t1: f64) -> f64 {
    let f = |a: f64| a * s.m1 - s.n * pmf_moments(u, a, t2).log_z;
    let mut fx = f(t1);
    for _ in 0..100 {
        let pm = pmf_moments(u, t1, t2);
        let g = s.m1 - s.n * pm.e1;
        let h = s.n * pm.var1;
        if h <= 0.0 || !g.is_finite() {
            break;
        }
        let mut step = g / h;
        let mut improved = false;
        for _ in 0..60 {
            let cand = t1 + step;
            let fc = f(cand);
            if fc >= fx {
                t1 = cand;
                fx = fc;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved || step.abs() < 1e-13 * (1.0 + t1.abs()) {
            break;
        }
    }
    t1
}

/// Caps the variance at `10⁸` times the floor. Weights that are not
/// log-concave on the grid otherwise push `θ₂` to zero.
const THETA2_MAX: f64 = -1e-8;

/// Newton on `(θ₁…, θ₂)` constrained to `−1 ≤ θ₂ ≤ THETA2_MAX`.
fn solve_group(u: &[f64], stats: &[Moments], t1_start: &[f64], t2_start: f64) -> (Vec<f64>, f64) {
    let k = stats.len();

    // Best point on the floor θ₂ = −1.
    let t1_floor: Vec<f64> = stats
        .iter()
        .zip(t1_start)
        .map(|(s, &a)| solve_theta1(u, s, -1.0, a))
        .collect();
    let d2: f64 = stats
        .iter()
        .zip(&t1_floor)
        .map(|(s, &a)| s.m2 - s.n * pmf_moments(u, a, -1.0).e2)
        .sum();
    if d2 <= 0.0 {
        // KKT: the objective wants smaller variance than the floor allows.
        return (t1_floor, -1.0);
    }

    let (mut t1, mut t2) = if t2_start > -1.0 && t2_start < 0.0 {
        (t1_start.to_vec(), t2_start)
    } else {
        (t1_floor.clone(), -1.0)
    };
    let mut fx = objective(u, stats, &t1, t2);
    let f_floor = objective(u, stats, &t1_floor, -1.0);
    if f_floor > fx {
        t1 = t1_floor;
        t2 = -1.0;
        fx = f_floor;
    }

    for _ in 0..200 {
        let mut grad = DVector::zeros(k + 1);
        let mut hess = DMatrix::zeros(k + 1, k + 1);
        for (i, (s, &a)) in stats.iter().zip(&t1).enumerate() {
            let pm = pmf_moments(u, a, t2);
            grad[i] = s.m1 - s.n * pm.e1;
            grad[k] += s.m2 - s.n * pm.e2;
            hess[(i, i)] = s.n * pm.var1;
            hess[(i, k)] = s.n * pm.cov12;
            hess[(k, i)] = s.n * pm.cov12;
            hess[(k, k)] += s.n * pm.var2;
        }
        let Some(step) = hess.clone().cholesky().map(|c| c.solve(&grad)) else {
            break;
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let c2 = (t2 + scale * step[k]).clamp(-1.0, THETA2_MAX);
            let c1: Vec<f64> = t1
                .iter()
                .enumerate()
                .map(|(i, a)| a + scale * step[i])
                .collect();
            let fc = objective(u, stats, &c1, c2);
            if fc >= fx {
                let moved =
                    (c2 - t2).abs() + c1.iter().zip(&t1).map(|(a, b)| (a - b).abs()).sum::<f64>();
                t1 = c1;
                t2 = c2;
                let gain = fc - fx;
                fx = fc;
                improved = moved > 1e-14 && gain > 1e-15 * fx.abs().max(1.0);
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (t1, t2)
}

/// Fit per-state `(μ, σ²)` maximizing `Σ_g w_{k,g} log φ_k(g)`.
///
/// `current` supplies the starting point and is returned unchanged for states
/// with no weight. The result never scores below `current`.
pub(crate) fn fit_emissions(
    grid: &TrendGrid,
    stats: &[StateStats<'_>],
    current: &[(f64, f64)],
    variance_floor: f64,
    tied: bool,
) -> Vec<(f64, f64)> {
    let alpha = grid.tick_size();
    if grid.len() == 1 {
        return current.to_vec();
    }
    let u = grid_units(grid);
    // Floor expressed in grid units: σ_u² ≥ floor/α², i.e. θ₂ ≥ −α²/(2·floor).
    // Rescale so the constraint reads θ₂ ≥ −1.
    let c = (2.0 * variance_floor / (alpha * alpha)).sqrt();
    let us: Vec<f64> = u.iter().map(|x| x / c).collect();
    let unit = alpha * c;

    let moments: Vec<Moments> = stats
        .iter()
        .map(|s| {
            let n: f64 = s.weights.iter().sum();
            let m1 = s.weights.iter().zip(&us).map(|(w, x)| w * x).sum();
            let m2 = s.weights.iter().zip(&us).map(|(w, x)| w * x * x).sum();
            Moments { n, m1, m2 }
        })
        .collect();
    let to_natural = |(mu, s2): (f64, f64)| {
        let s2u = s2 / (unit * unit);
        let t2 = -0.5 / s2u;
        (mu / unit / s2u, t2)
    };
    let from_natural = |t1: f64, t2: f64| {
        let s2u = -0.5 / t2;
        (t1 * s2u * unit, s2u * unit * unit)
    };

    let mut out = current.to_vec();
    let active: Vec<usize> = (0..stats.len()).filter(|&i| moments[i].n > 0.0).collect();
    if active.is_empty() {
        return out;
    }
    let groups: Vec<Vec<usize>> = if tied {
        vec![active]
    } else {
        active.into_iter().map(|i| vec![i]).collect()
    };

    for group in groups {
        let ms: Vec<Moments> = group
            .iter()
            .map(|&i| Moments {
                n: moments[i].n,
                m1: moments[i].m1,
                m2: moments[i].m2,
            })
            .collect();
        let starts: Vec<(f64, f64)> = group.iter().map(|&i| to_natural(current[i])).collect();
        let t1_cur: Vec<f64> = starts.iter().map(|s| s.0).collect();
        let t2_cur = starts.iter().map(|s| s.1).sum::<f64>() / starts.len() as f64;
        let t2_cur = t2_cur.clamp(-1.0, THETA2_MAX);
        let (t1, t2) = solve_group(&us, &ms, &t1_cur, t2_cur);
        let f_new = objective(&us, &ms, &t1, t2);
        let f_cur: f64 = starts
            .iter()
            .zip(&ms)
            .map(|(&(a, b), s)| objective(&us, std::slice::from_ref(s), &[a], b))
            .sum();
        if f_new >= f_cur {
            for (j, &i) in group.iter().enumerate() {
                let (mu, s2) = from_natural(t1[j], t2);
                out[i] = (mu, s2.max(variance_floor));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::discretized_gaussian_pmf;

    fn expected_loglik(grid: &TrendGrid, w: &[f64], mu: f64, s2: f64) -> f64 {
        let p = discretized_gaussian_pmf(grid, mu, s2).unwrap();
        w.iter().zip(&p).map(|(w, p)| w * p.ln()).sum()
    }

    #[test]
    fn recovers_generating_pmf_from_exact_weights() {
        let grid = TrendGrid::new(0.05, 1.0).unwrap();
        let w = discretized_gaussian_pmf(&grid, 0.23, 0.04).unwrap();
        let w: Vec<f64> = w.iter().map(|x| 1000.0 * x).collect();
        let out = fit_emissions(
            &grid,
            &[StateStats { weights: &w }],
            &[(0.0, 0.1)],
            0.00125,
            false,
        );
        assert!((out[0].0 - 0.23).abs() < 1e-7, "{:?}", out);
        assert!((out[0].1 - 0.04).abs() < 1e-7, "{:?}", out);
    }

    #[test]
    fn truncated_pmf_is_matched_by_moments_not_raw_gaussian() {
        // Mass piled against the edge of the grid: the fitted pmf's mean equals
        // the weighted data mean even though μ itself lies elsewhere.
        let grid = TrendGrid::new(0.25, 0.5).unwrap();
        let w = [0.5, 2.0, 6.0, 9.0, 7.0];
        let out = fit_emissions(
            &grid,
            &[StateStats { weights: &w }],
            &[(0.0, 0.2)],
            0.03125,
            false,
        );
        let p = discretized_gaussian_pmf(&grid, out[0].0, out[0].1).unwrap();
        let mean: f64 = grid.values().iter().zip(&p).map(|(g, p)| g * p).sum();
        let data_mean: f64 = grid
            .values()
            .iter()
            .zip(&w)
            .map(|(g, w)| g * w)
            .sum::<f64>()
            / w.iter().sum::<f64>();
        assert!(
            (mean - data_mean).abs() < 1e-9,
            "{mean} {data_mean} {out:?}"
        );
        assert!((out[0].0 - data_mean).abs() > 1e-3);
    }

    #[test]
    fn convex_weights_stay_finite() {
        let grid = TrendGrid::new(0.25, 0.5).unwrap();
        let w = [1.0, 2.0, 3.0, 5.0, 9.0];
        let out = fit_emissions(
            &grid,
            &[StateStats { weights: &w }],
            &[(0.0, 0.2)],
            0.03125,
            false,
        );
        assert!(out[0].0.is_finite() && out[0].1.is_finite());
        let f = |o: (f64, f64)| expected_loglik(&grid, &w, o.0, o.1);
        assert!(f(out[0]) >= f((0.0, 0.2)));
    }

    #[test]
    fn concentrated_weights_hit_the_floor() {
        let grid = TrendGrid::new(0.1, 0.5).unwrap();
        let mut w = vec![0.0; grid.len()];
        w[7] = 10.0;
        let floor = 0.005;
        let out = fit_emissions(
            &grid,
            &[StateStats { weights: &w }],
            &[(0.0, 0.05)],
            floor,
            false,
        );
        assert!((out[0].1 - floor).abs() < 1e-15);
        // μ moves toward the occupied grid point
        assert!(out[0].0 > 0.15);
        let best = expected_loglik(&grid, &w, out[0].0, out[0].1);
        for d in [-0.01, 0.01] {
            assert!(expected_loglik(&grid, &w, out[0].0 + d, floor) <= best + 1e-12);
        }
    }

    #[test]
    fn tied_fit_shares_variance_and_beats_perturbations() {
        let grid = TrendGrid::new(0.05, 1.0).unwrap();
        let a = discretized_gaussian_pmf(&grid, -0.3, 0.02).unwrap();
        let b = discretized_gaussian_pmf(&grid, 0.4, 0.05).unwrap();
        let wa: Vec<f64> = a.iter().map(|x| 300.0 * x).collect();
        let wb: Vec<f64> = b.iter().map(|x| 700.0 * x).collect();
        let stats = [StateStats { weights: &wa }, StateStats { weights: &wb }];
        let out = fit_emissions(&grid, &stats, &[(-0.1, 0.03), (0.1, 0.03)], 0.00125, true);
        assert_eq!(out[0].1, out[1].1);
        let score = |o: &[(f64, f64)]| {
            expected_loglik(&grid, &wa, o[0].0, o[0].1)
                + expected_loglik(&grid, &wb, o[1].0, o[1].1)
        };
        let best = score(&out);
        for (dm, ds) in [(0.002, 0.0), (0.0, 0.001), (0.0, -0.001)] {
            let pert = [(out[0].0 + dm, out[0].1 + ds), (out[1].0, out[1].1 + ds)];
            assert!(score(&pert) <= best + 1e-9);
        }
    }

    #[test]
    fn empty_state_keeps_current_parameters() {
        let grid = TrendGrid::new(0.1, 0.5).unwrap();
        let w = vec![0.0; grid.len()];
        let out = fit_emissions(
            &grid,
            &[StateStats { weights: &w }],
            &[(0.3, 0.07)],
            0.005,
            false,
        );
        assert_eq!(out, vec![(0.3, 0.07)]);
    }
}
