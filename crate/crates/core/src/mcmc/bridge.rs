use std::ops::RangeInclusive;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_likelihood_of, mcmc_sample, snap_data, Draw, McmcChain, McmcConfig, McmcPrior};
use crate::error::{Error, Result};
use crate::hmm::TrendGrid;
use crate::math::{for_each_permutation, log_sum_exp, mean};

/// Minimum number of posterior draws accepted by the estimator.
pub const MIN_BRIDGE_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    /// Posterior draws used (`N`), thinned evenly from the chain.
    pub posterior_draws: usize,
    /// Draws from the importance density (`L`).
    pub importance_draws: usize,
    /// Gaussian components in the importance density, one per contiguous
    /// block of posterior draws; reduced for large `K` so `K!·components`
    /// stays bounded.
    pub components: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            posterior_draws: 4000,
            importance_draws: 4000,
            components: 12,
            tolerance: 1e-8,
            max_iterations: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeEstimate {
    pub log_ml: f64,
    /// Approximate standard error of `log_ml`.
    pub std_error: f64,
    pub posterior_draws: usize,
    pub importance_draws: usize,
    pub iterations: usize,
}

/// Unconstrained coordinates: additive log-ratios of each transition row
/// against its last entry, the means, and the log variances.
fn to_coords(d: &Draw, out: &mut Vec<f64>) {
    let k = d.k();
    out.clear();
    if k > 1 {
        for i in 0..k {
            let last = d.trans[i * k + k - 1].ln();
            out.extend((0..k - 1).map(|j| d.trans[i * k + j].ln() - last));
        }
    }
    out.extend(&d.means);
    out.extend(d.variances.iter().map(|v| v.ln()));
}

/// Position of the first mean in the coordinate vector.
fn mean_offset(k: usize) -> usize {
    if k > 1 {
        k * (k - 1)
    } else {
        0
    }
}

fn from_coords(z: &[f64], k: usize) -> Draw {
    let mut trans = vec![1.0; k * k];
    let mut pos = 0;
    if k > 1 {
        for i in 0..k {
            let row = &z[pos..pos + k - 1];
            let m = row.iter().copied().fold(0.0, f64::max);
            let denom = (-m).exp() + row.iter().map(|x| (x - m).exp()).sum::<f64>();
            for j in 0..k - 1 {
                trans[i * k + j] = ((row[j] - m).exp() / denom).max(1e-300);
            }
            trans[i * k + k - 1] = ((-m).exp() / denom).max(1e-300);
            pos += k - 1;
        }
    }
    let means = z[pos..pos + k].to_vec();
    let variances = z[pos + k..pos + 2 * k].iter().map(|v| v.exp()).collect();
    Draw {
        trans,
        means,
        variances,
        loglik: 0.0,
        log_posterior: 0.0,
    }
}

/// `log |dz/dθ|` of the coordinate map; invariant under relabelling.
fn log_jacobian(d: &Draw) -> f64 {
    let a: f64 = if d.k() > 1 {
        d.trans.iter().map(|x| x.ln()).sum()
    } else {
        0.0
    };
    -a - d.variances.iter().map(|v| v.ln()).sum::<f64>()
}

/// Terms this far below the running maximum are dropped from the
/// permutation sum; their total weight is below `K!·blocks·e^-50`.
const NEGLIGIBLE_LOG_TERM: f64 = 50.0;

/// Cap on `K!·blocks`; large `K` gets fewer mixture components.
const MAX_PERMUTATION_TERMS: usize = 720;

struct Component {
    centre: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
    /// Cholesky factor of the covariance block of the `K` mean coordinates.
    mean_chol: Cholesky<f64, Dyn>,
}

impl Component {
    fn fit(rows: &[Vec<f64>], k: usize) -> Result<Self> {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let centre = DVector::from_fn(dim, |i, _| rows.iter().map(|r| r[i]).sum::<f64>() / n);
        let mut cov = DMatrix::zeros(dim, dim);
        for r in rows {
            let d = DVector::from_fn(dim, |i, _| r[i] - centre[i]);
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        for i in 0..dim {
            cov[(i, i)] += 1e-10 * cov[(i, i)].abs().max(1e-12);
        }
        let singular = || Error::BridgeFailure("draw covariance is singular".into());
        let off = mean_offset(k);
        let mean_chol =
            Cholesky::new(cov.view((off, off), (k, k)).into_owned()).ok_or_else(singular)?;
        let chol = Cholesky::new(cov).ok_or_else(singular)?;
        let log_det: f64 = chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|x| x.ln())
            .sum::<f64>()
            * 2.0;
        let log_norm = -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Component {
            centre,
            chol,
            log_norm,
            mean_chol,
        })
    }

    /// Upper bound on `log_density` from the means alone: the joint
    /// quadratic form is at least the marginal one.
    fn log_density_bound(&self, means: &[f64]) -> f64 {
        let off = mean_offset(means.len());
        let d = DVector::from_fn(means.len(), |i, _| means[i] - self.centre[off + i]);
        let w = self
            .mean_chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("Cholesky factor is non-singular");
        self.log_norm - 0.5 * w.norm_squared()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let d = DVector::from_fn(z.len(), |i, _| z[i] - self.centre[i]);
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&d)
            .expect("Cholesky factor is non-singular");
        self.log_norm - 0.5 * w.norm_squared()
    }
}

/// Equal-weight Gaussian mixture in coordinate space, one component per
/// block of μ-ordered draws, symmetrized over all label permutations.
/// Blocks let a chain that drifts between modes cover each of them.
struct ImportanceDensity {
    k: usize,
    components: Vec<Component>,
    perms: Vec<Vec<usize>>,
}

impl ImportanceDensity {
    fn fit(draws: &[Draw], components: usize) -> Result<Self> {
        let k = draws[0].k();
        let mut z = Vec::new();
        let rows: Vec<Vec<f64>> = draws
            .iter()
            .map(|d| {
                to_coords(&d.ordered(), &mut z);
                z.clone()
            })
            .collect();
        let dim = rows[0].len();
        let perm_count = (1..=k).product::<usize>();
        let blocks = components
            .min(rows.len() / (4 * (dim + 1)))
            .min(MAX_PERMUTATION_TERMS / perm_count)
            .max(1);
        let size = rows.len() / blocks;
        let components = (0..blocks)
            .map(|b| {
                let end = if b + 1 == blocks {
                    rows.len()
                } else {
                    (b + 1) * size
                };
                Component::fit(&rows[b * size..end], k)
            })
            .collect::<Result<_>>()?;
        let mut perms = Vec::new();
        for_each_permutation(k, |p| perms.push(p.to_vec()));
        Ok(ImportanceDensity {
            k,
            components,
            perms,
        })
    }

    fn log_density(&self, d: &Draw) -> f64 {
        let mut bounds: Vec<(f64, usize, usize)> =
            Vec::with_capacity(self.perms.len() * self.components.len());
        let mut means = vec![0.0; self.k];
        for (pi, p) in self.perms.iter().enumerate() {
            for (m, &j) in means.iter_mut().zip(p) {
                *m = d.means[j];
            }
            for (ci, c) in self.components.iter().enumerate() {
                bounds.push((c.log_density_bound(&means), pi, ci));
            }
        }
        bounds.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut z = Vec::new();
        let mut terms = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut last_perm = usize::MAX;
        for &(bound, pi, ci) in &bounds {
            if bound < best - NEGLIGIBLE_LOG_TERM {
                break;
            }
            if pi != last_perm {
                to_coords(&d.permuted(&self.perms[pi]), &mut z);
                last_perm = pi;
            }
            let t = self.components[ci].log_density(&z);
            best = best.max(t);
            terms.push(t);
        }
        let count = (self.perms.len() * self.components.len()) as f64;
        log_sum_exp(&terms) - count.ln() + log_jacobian(d)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Draw {
        let c = &self.components[rng.random_range(0..self.components.len())];
        let e = DVector::from_fn(c.centre.len(), |_, _| StandardNormal.sample(rng));
        let z = &c.centre + c.chol.l_dirty().lower_triangle() * e;
        let d = from_coords(z.as_slice(), self.k);
        let p = &self.perms[rng.random_range(0..self.perms.len())];
        d.permuted(p)
    }
}

/// Variance of the mean of `x` by batch means (20 batches).
fn batch_mean_variance(x: &[f64]) -> f64 {
    let nb = 20.min(x.len());
    let size = x.len() / nb;
    let means: Vec<f64> = (0..nb)
        .map(|b| mean(&x[b * size..(b + 1) * size]))
        .collect();
    let m = mean(&means);
    means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ((nb - 1) as f64 * nb as f64)
}

/// Optimal bridge-sampling estimate of `log p(Δy | K)` from a chain on the
/// same data.
pub fn bridge_marginal_likelihood(
    data: &[f64],
    chain: &McmcChain,
    prior: &McmcPrior,
    cfg: &BridgeConfig,
) -> Result<BridgeEstimate> {
    if chain.draws.len() < MIN_BRIDGE_DRAWS {
        return Err(Error::BridgeFailure(format!(
            "{} posterior draws, need at least {MIN_BRIDGE_DRAWS}",
            chain.draws.len()
        )));
    }
    if cfg.importance_draws == 0 || cfg.posterior_draws == 0 || cfg.components == 0 {
        return Err(Error::param("bridge draw counts must be positive"));
    }
    let n_post = cfg.posterior_draws.min(chain.draws.len());
    let step = chain.draws.len() as f64 / n_post as f64;
    let post: Vec<&Draw> = (0..n_post)
        .map(|i| &chain.draws[(i as f64 * step) as usize])
        .collect();
    let owned: Vec<Draw> = post.iter().map(|d| (*d).clone()).collect();
    let q = ImportanceDensity::fit(&owned, cfg.components)?;

    let grid: &TrendGrid = &chain.grid;
    let idx = snap_data(data, grid)?;
    let pr = prior.resolve(data, chain.k, grid)?;

    let l1: Vec<f64> = post
        .par_iter()
        .map(|d| d.log_posterior - q.log_density(d))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proposals: Vec<Draw> = (0..cfg.importance_draws)
        .map(|_| q.sample(&mut rng))
        .collect();
    let l2: Vec<f64> = proposals
        .par_iter()
        .map(|d| {
            let lp = pr.log_density(d);
            if !lp.is_finite() {
                return Ok(f64::NEG_INFINITY);
            }
            Ok(log_likelihood_of(&idx, d, grid)? + lp - q.log_density(d))
        })
        .collect::<Result<_>>()?;
    if l1.iter().any(|v| !v.is_finite()) {
        return Err(Error::BridgeFailure(
            "non-finite density ratio at a posterior draw".into(),
        ));
    }
    if l2.iter().all(|v| !v.is_finite()) {
        return Err(Error::BridgeFailure(
            "no importance draw has positive posterior density".into(),
        ));
    }

    let (n1, n2) = (n_post as f64, cfg.importance_draws as f64);
    let (ls1, ls2) = ((n1 / (n1 + n2)).ln(), (n2 / (n1 + n2)).ln());
    let mut sorted = l1.clone();
    sorted.sort_by(f64::total_cmp);
    let shift = sorted[sorted.len() / 2];
    let a: Vec<f64> = l1.iter().map(|v| v - shift).collect();
    let b: Vec<f64> = l2.iter().map(|v| v - shift).collect();
    let lse2 = |x: f64, y: f64| {
        if x > y {
            x + (y - x).exp().ln_1p()
        } else {
            y + (x - y).exp().ln_1p()
        }
    };

    // The bridge equation (r/N) Σ 1/(s1 p + s2 r q) = (1/L) Σ p/(s1 p + s2 r q)
    // has a strictly increasing left-minus-right side in r; bisect on log r.
    let gap = |log_r: f64| {
        let lhs: Vec<f64> = a
            .iter()
            .map(|&v| log_r - lse2(ls1 + v, ls2 + log_r))
            .collect();
        let rhs: Vec<f64> = b.iter().map(|&v| v - lse2(ls1 + v, ls2 + log_r)).collect();
        (log_sum_exp(&lhs) - n1.ln()) - (log_sum_exp(&rhs) - n2.ln())
    };
    let start = log_sum_exp(&b) - n2.ln();
    let start = if start.is_finite() { start } else { 0.0 };
    let (mut lo, mut hi) = (start - 1.0, start + 1.0);
    let mut iterations = 0;
    while gap(lo) > 0.0 || gap(hi) < 0.0 {
        iterations += 1;
        if iterations > 200 {
            return Err(Error::BridgeFailure(
                "could not bracket the bridge equation".into(),
            ));
        }
        let w = hi - lo;
        if gap(lo) > 0.0 {
            lo -= w;
        }
        if gap(hi) < 0.0 {
            hi += w;
        }
    }
    while hi - lo > cfg.tolerance {
        iterations += 1;
        if iterations >= cfg.max_iterations {
            return Err(Error::BridgeFailure(format!(
                "no convergence in {iterations} iterations"
            )));
        }
        let mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if !g.is_finite() {
            return Err(Error::BridgeFailure(format!(
                "bridge equation is {g} at log r = {mid}"
            )));
        }
        if g > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let log_r = 0.5 * (lo + hi);

    // Relative error from the importance and (autocorrelated) posterior terms.
    let s1 = n1 / (n1 + n2);
    let s2 = n2 / (n1 + n2);
    let f2: Vec<f64> = b
        .iter()
        .map(|&v| {
            let w = (v - log_r).exp();
            if w.is_finite() {
                w / (s1 * w + s2)
            } else {
                1.0 / s1
            }
        })
        .collect();
    let f1: Vec<f64> = a
        .iter()
        .map(|&v| 1.0 / (s1 * (v - log_r).exp() + s2))
        .collect();
    let m2 = mean(&f2);
    let var2 = f2.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / (n2 - 1.0).max(1.0);
    let m1 = mean(&f1);
    let re2 = var2 / (n2 * m2 * m2) + batch_mean_variance(&f1) / (m1 * m1);

    Ok(BridgeEstimate {
        log_ml: log_r + shift,
        std_error: re2.sqrt(),
        posterior_draws: n_post,
        importance_draws: cfg.importance_draws,
        iterations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BridgeSelection {
    pub estimates: Vec<(usize, BridgeEstimate)>,
    /// `K` values whose chain or estimate failed, with the reason.
    pub failures: Vec<(usize, String)>,
    pub best_k: usize,
}

/// Sample and estimate the marginal likelihood for each `K`; pick the largest.
/// Failed `K` values are recorded and skipped.
pub fn select_k_bridge(
    data: &[f64],
    grid: &TrendGrid,
    ks: RangeInclusive<usize>,
    prior: &McmcPrior,
    mcmc: &McmcConfig,
    bridge: &BridgeConfig,
) -> Result<BridgeSelection> {
    if *ks.end() > 6 {
        log::warn!(
            "bridge sampling over K! permutations is slow for K = {}",
            ks.end()
        );
    }
    let ks: Vec<usize> = ks.collect();
    let results: Vec<(usize, Result<BridgeEstimate>)> = ks
        .par_iter()
        .map(|&k| {
            let seeded = McmcConfig {
                seed: mcmc.seed.wrapping_add(k as u64 * 7919),
                ..*mcmc
            };
            let est = mcmc_sample(data, grid, k, prior, &seeded).and_then(|chain| {
                let bc = BridgeConfig {
                    seed: bridge.seed.wrapping_add(k as u64 * 104_729),
                    ..*bridge
                };
                bridge_marginal_likelihood(data, &chain, prior, &bc)
            });
            (k, est)
        })
        .collect();
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in results {
        match r {
            Ok(e) => estimates.push((k, e)),
            Err(e) => {
                log::warn!("K = {k} skipped: {e}");
                failures.push((k, e.to_string()));
            }
        }
    }
    let best_k = estimates
        .iter()
        .max_by(|a, b| a.1.log_ml.total_cmp(&b.1.log_ml))
        .map(|(k, _)| *k)
        .ok_or_else(|| Error::BridgeFailure("every K failed".into()))?;
    Ok(BridgeSelection {
        estimates,
        failures,
        best_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_round_trip() {
        let d = Draw {
            trans: vec![0.7, 0.2, 0.1, 0.05, 0.9, 0.05, 0.3, 0.3, 0.4],
            means: vec![-1.0, 0.0, 2.0],
            variances: vec![0.5, 1.5, 0.1],
            loglik: 0.0,
            log_posterior: 0.0,
        };
        let mut z = Vec::new();
        to_coords(&d, &mut z);
        assert_eq!(z.len(), 12);
        let back = from_coords(&z, 3);
        for (a, b) in d
            .trans
            .iter()
            .zip(&back.trans)
            .chain(d.variances.iter().zip(&back.variances))
        {
            assert!((a - b).abs() < 1e-12);
        }
        let p = d.permuted(&[2, 0, 1]);
        assert!((log_jacobian(&p) - log_jacobian(&d)).abs() < 1e-12);
    }

    #[test]
    fn too_few_draws_is_an_error() {
        let grid = TrendGrid::new(0.1, 2.0).unwrap();
        let data: Vec<f64> = (0..100)
            .map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.5)
            .collect();
        let cfg = McmcConfig {
            burn_in: 10,
            run_length: 200,
            seed: 1,
            permute: true,
        };
        let chain = mcmc_sample(&data, &grid, 1, &McmcPrior::default(), &cfg).unwrap();
        assert!(matches!(
            bridge_marginal_likelihood(
                &data,
                &chain,
                &McmcPrior::default(),
                &BridgeConfig::default()
            ),
            Err(Error::BridgeFailure(_))
        ));
    }
}
