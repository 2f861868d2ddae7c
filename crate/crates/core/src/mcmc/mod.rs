//! Bayesian learning: data-augmented Gibbs sampling with random label
//! permutation, bridge-sampling estimates of the marginal likelihood, and the
//! posterior-mode point estimate.
//!
//! The initial law is tied to the transition matrix (`π` is the stationary
//! distribution of `A`), so a draw is `(A, μ, σ²)`. Conjugate proposals for
//! the continuous Gaussian are corrected by Metropolis-Hastings for the grid
//! normalizer of the discretized emissions.

mod bridge;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hmm::{log_pmf, stationary_distribution, HmmParams, TrendGrid};
use crate::math::{log_sum_exp, mean, sample_variance};

pub use bridge::{
    bridge_marginal_likelihood, select_k_bridge, BridgeConfig, BridgeEstimate, BridgeSelection,
};

/// Hyperparameters; data-dependent values are resolved per data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcPrior {
    /// Dirichlet concentration on the diagonal of each transition row.
    pub stay_concentration: f64,
    /// Off-diagonal concentration; `None` means `1/(K−1)`.
    pub switch_concentration: Option<f64>,
    /// Prior mean of the state means; `None` centres on the data mean.
    pub mean_center: Option<f64>,
    /// Prior variance of the state means in units of the data variance.
    pub mean_variance_scale: f64,
    /// Inverse-gamma shape of the state variances.
    pub variance_shape: f64,
    /// Gamma shape of the hierarchical inverse-gamma scale.
    pub hyper_shape: f64,
}

impl Default for McmcPrior {
    fn default() -> Self {
        McmcPrior {
            stay_concentration: 4.0,
            switch_concentration: None,
            mean_center: None,
            mean_variance_scale: 4.0,
            variance_shape: 2.5,
            hyper_shape: 0.5,
        }
    }
}

/// Prior with every hyperparameter fixed for one data set and `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct ResolvedPrior {
    k: usize,
    e_stay: f64,
    e_switch: f64,
    m0: f64,
    v0: f64,
    c0: f64,
    g0: f64,
    /// Gamma rate of the inverse-gamma scale.
    big_g0: f64,
    floor: f64,
}

impl McmcPrior {
    pub(crate) fn resolve(
        &self,
        data: &[f64],
        k: usize,
        grid: &TrendGrid,
    ) -> Result<ResolvedPrior> {
        if !(self.stay_concentration > 0.0
            && self.mean_variance_scale > 0.0
            && self.hyper_shape > 0.0)
        {
            return Err(Error::param(
                "prior concentrations and scales must be positive",
            ));
        }
        if !(self.variance_shape > 1.0) {
            return Err(Error::param("variance shape must exceed 1"));
        }
        let e_switch = match self.switch_concentration {
            Some(e) if e > 0.0 => e,
            Some(_) => return Err(Error::param("switch concentration must be positive")),
            None if k > 1 => 1.0 / (k - 1) as f64,
            None => 1.0,
        };
        let var = sample_variance(data).max(grid.variance_floor());
        let c0 = self.variance_shape;
        Ok(ResolvedPrior {
            k,
            e_stay: self.stay_concentration,
            e_switch,
            m0: self.mean_center.unwrap_or_else(|| mean(data)),
            v0: self.mean_variance_scale * var,
            c0,
            g0: self.hyper_shape,
            big_g0: self.hyper_shape / (var * (c0 - 1.0)),
            floor: grid.variance_floor(),
        })
    }
}

impl ResolvedPrior {
    fn concentration(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.e_stay
        } else {
            self.e_switch
        }
    }

    /// `log p(A) + log p(μ) + log p(σ²)` with the inverse-gamma scale
    /// integrated out. `−∞` below the variance floor.
    pub(crate) fn log_density(&self, draw: &Draw) -> f64 {
        let k = self.k;
        let mut lp = 0.0;
        if k > 1 {
            for i in 0..k {
                let e: Vec<f64> = (0..k).map(|j| self.concentration(i, j)).collect();
                let total: f64 = e.iter().sum();
                lp += ln_gamma(total) - e.iter().map(|&x| ln_gamma(x)).sum::<f64>();
                for j in 0..k {
                    lp += (e[j] - 1.0) * draw.trans[i * k + j].ln();
                }
            }
        }
        for &m in &draw.means {
            lp += -0.5 * (2.0 * std::f64::consts::PI * self.v0).ln()
                - 0.5 * (m - self.m0).powi(2) / self.v0;
        }
        if draw
            .variances
            .iter()
            .any(|&v| !(v >= self.floor * (1.0 - 1e-12)))
        {
            return f64::NEG_INFINITY;
        }
        let (c0, g0, gg) = (self.c0, self.g0, self.big_g0);
        let kc = k as f64 * c0;
        let inv_sum: f64 = draw.variances.iter().map(|v| 1.0 / v).sum();
        lp += g0 * gg.ln() + ln_gamma(kc + g0) - k as f64 * ln_gamma(c0) - ln_gamma(g0);
        lp -= (c0 + 1.0) * draw.variances.iter().map(|v| v.ln()).sum::<f64>();
        lp -= (kc + g0) * (gg + inv_sum).ln();
        lp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub run_length: usize,
    pub seed: u64,
    /// Randomly relabel states after every sweep.
    pub permute: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 2000,
            run_length: 10_000,
            seed: 0,
            permute: true,
        }
    }
}

/// One stored parameter draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    /// Row-major `K × K`.
    pub trans: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub loglik: f64,
    pub log_posterior: f64,
}

impl Draw {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn initial(&self) -> Vec<f64> {
        stationary_distribution(&self.trans, self.k())
    }

    pub fn to_params(&self, grid: &TrendGrid) -> Result<HmmParams> {
        HmmParams::from_flat(
            self.trans.clone(),
            self.initial(),
            self.means.clone(),
            self.variances.clone(),
            grid.clone(),
        )
    }

    /// New state `j` is old state `perm[j]`.
    pub(crate) fn permuted(&self, perm: &[usize]) -> Draw {
        let k = self.k();
        let mut trans = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                trans[i * k + j] = self.trans[perm[i] * k + perm[j]];
            }
        }
        Draw {
            trans,
            means: perm.iter().map(|&p| self.means[p]).collect(),
            variances: perm.iter().map(|&p| self.variances[p]).collect(),
            loglik: self.loglik,
            log_posterior: self.log_posterior,
        }
    }

    /// Relabel so that means are ascending.
    pub fn ordered(&self) -> Draw {
        let mut perm: Vec<usize> = (0..self.k()).collect();
        perm.sort_by(|&a, &b| self.means[a].total_cmp(&self.means[b]));
        self.permuted(&perm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcChain {
    pub k: usize,
    pub grid: TrendGrid,
    /// Post burn-in draws, in order.
    pub draws: Vec<Draw>,
    pub config: McmcConfig,
    /// Acceptance rates of the transition, mean, and variance MH steps.
    pub acceptance: [f64; 3],
}

impl McmcChain {
    /// Posterior means and standard deviations of the μ-ordered state means.
    pub fn ordered_mean_summary(&self) -> Vec<(f64, f64)> {
        let ordered: Vec<Draw> = self.draws.iter().map(Draw::ordered).collect();
        (0..self.k)
            .map(|j| {
                let v: Vec<f64> = ordered.iter().map(|d| d.means[j]).collect();
                (
                    mean(&v),
                    if v.len() > 1 {
                        sample_variance(&v).sqrt()
                    } else {
                        0.0
                    },
                )
            })
            .collect()
    }

    /// One row per draw: flattened `A`, `π`, `μ`, `σ²`, log-likelihood, log posterior.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let k = self.k;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = Vec::new();
        for i in 0..k {
            for j in 0..k {
                header.push(format!("a_{i}_{j}"));
            }
        }
        header.extend((0..k).map(|i| format!("pi_{i}")));
        header.extend((0..k).map(|i| format!("mu_{i}")));
        header.extend((0..k).map(|i| format!("sigma2_{i}")));
        header.push("loglik".into());
        header.push("log_posterior".into());
        w.write_record(&header)?;
        for d in &self.draws {
            let row: Vec<String> = d
                .trans
                .iter()
                .chain(&d.initial())
                .chain(&d.means)
                .chain(&d.variances)
                .chain([&d.loglik, &d.log_posterior])
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Log normalizer of the unnormalized grid Gaussian `Σ_g exp(−(g−μ)²/2σ²)`.
fn log_grid_normalizer(values: &[f64], mu: f64, s2: f64) -> f64 {
    let terms: Vec<f64> = values
        .iter()
        .map(|g| -(g - mu).powi(2) / (2.0 * s2))
        .collect();
    log_sum_exp(&terms)
}

/// Emission table scaled by its per-grid-point maximum over states.
struct Emissions {
    k: usize,
    g: usize,
    scaled: Vec<f64>,
    col_max: Vec<f64>,
}

impl Emissions {
    fn new(grid: &TrendGrid, means: &[f64], variances: &[f64]) -> Result<Self> {
        let k = means.len();
        let g = grid.len();
        let logs: Vec<Vec<f64>> = means
            .iter()
            .zip(variances)
            .map(|(&m, &v)| log_pmf(grid, m, v))
            .collect::<Result<_>>()?;
        let col_max: Vec<f64> = (0..g)
            .map(|gi| logs.iter().map(|l| l[gi]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut scaled = vec![0.0; k * g];
        for s in 0..k {
            for gi in 0..g {
                scaled[gi * k + s] = (logs[s][gi] - col_max[gi]).exp();
            }
        }
        Ok(Emissions {
            k,
            g,
            scaled,
            col_max,
        })
    }

    fn column(&self, gi: usize) -> &[f64] {
        &self.scaled[gi * self.k..(gi + 1) * self.k]
    }
}

/// Forward pass with `π = stationary(A)`; fills normalized filtering rows when
/// `alpha` is given and returns the log-likelihood.
fn forward(idx: &[usize], trans: &[f64], em: &Emissions, mut alpha: Option<&mut Vec<f64>>) -> f64 {
    let k = em.k;
    debug_assert_eq!(em.g * k, em.scaled.len());
    let mut cols = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cols[j * k + i] = trans[i * k + j];
        }
    }
    let mut cur = stationary_distribution(trans, k);
    let mut next = vec![0.0; k];
    let mut ll = 0.0;
    let mut scale = 1.0;
    for (t, &gi) in idx.iter().enumerate() {
        let e = em.column(gi);
        let mut z = 0.0;
        if t > 0 {
            for (j, n) in next.iter_mut().enumerate() {
                let col = &cols[j * k..(j + 1) * k];
                let p: f64 = cur.iter().zip(col).map(|(c, a)| c * a).sum();
                *n = p * e[j];
                z += *n;
            }
            std::mem::swap(&mut cur, &mut next);
        } else {
            for (c, &ev) in cur.iter_mut().zip(e) {
                *c *= ev;
                z += *c;
            }
        }
        if !(z > 0.0) {
            return f64::NEG_INFINITY;
        }
        let inv = 1.0 / z;
        cur.iter_mut().for_each(|c| *c *= inv);
        // Scale factors are multiplied up and logged only before underflow.
        scale *= z;
        if scale < 1e-100 {
            ll += scale.ln();
            scale = 1.0;
        }
        ll += em.col_max[gi];
        if let Some(a) = alpha.as_deref_mut() {
            for (dst, &c) in a[t * k..(t + 1) * k].iter_mut().zip(&cur) {
                *dst = c;
            }
        }
    }
    ll + scale.ln()
}

pub(crate) fn log_likelihood_of(idx: &[usize], draw: &Draw, grid: &TrendGrid) -> Result<f64> {
    let em = Emissions::new(grid, &draw.means, &draw.variances)?;
    Ok(forward(idx, &draw.trans, &em, None))
}

fn categorical<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(w.len() - 1)
}

fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut g: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map(|d| d.sample(rng).max(1e-300))
                .map_err(|e| Error::SamplerFailure(format!("gamma({a}): {e}")))
        })
        .collect::<Result<_>>()?;
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= s);
    Ok(g)
}

pub(crate) fn snap_data(data: &[f64], grid: &TrendGrid) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(t, &dy)| grid.snap(dy).ok_or(Error::DegenerateLikelihood { t }))
        .collect()
}

/// Gibbs sampler over `(states, A, μ, σ², C₀)`. Deterministic given the seed.
pub fn mcmc_sample(
    data: &[f64],
    grid: &TrendGrid,
    k: usize,
    prior: &McmcPrior,
    cfg: &McmcConfig,
) -> Result<McmcChain> {
    if k == 0 {
        return Err(Error::param("K must be positive"));
    }
    if data.len() < 10 * k {
        return Err(Error::InsufficientData(format!(
            "{} observations for K = {k}",
            data.len()
        )));
    }
    if cfg.run_length <= cfg.burn_in {
        return Err(Error::param("run length must exceed burn-in"));
    }
    let idx = snap_data(data, grid)?;
    let y: Vec<f64> = idx.iter().map(|&i| grid.value(i)).collect();
    let values = grid.values();
    let pr = prior.resolve(data, k, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = idx.len();

    // Start: sticky prior-mean rows, quantile means, shared variance.
    let mut trans = vec![0.0; k * k];
    for i in 0..k {
        let total: f64 = (0..k).map(|j| pr.concentration(i, j)).sum();
        for j in 0..k {
            trans[i * k + j] = pr.concentration(i, j) / total;
        }
    }
    let mut sorted = y.clone();
    sorted.sort_by(f64::total_cmp);
    let mut means: Vec<f64> = (0..k)
        .map(|j| sorted[((j as f64 + 0.5) / k as f64 * n as f64) as usize])
        .collect();
    let mut variances = vec![(sample_variance(&y) / k as f64).max(pr.floor); k];
    let mut c_scale = pr.g0 / pr.big_g0;

    let mut alpha = vec![0.0; n * k];
    let mut states = vec![0usize; n];
    let mut draws: Vec<Draw> = Vec::with_capacity(cfg.run_length - cfg.burn_in);
    let mut accepted = [0usize; 3];
    let mut proposed = [0usize; 3];
    let mut perm: Vec<usize> = (0..k).collect();

    for sweep in 0..=cfg.run_length {
        // Forward filter; its likelihood belongs to the previous draw.
        let em = Emissions::new(grid, &means, &variances)?;
        let ll = forward(&idx, &trans, &em, Some(&mut alpha));
        if !ll.is_finite() {
            return Err(Error::SamplerFailure(format!(
                "non-finite likelihood at sweep {sweep}"
            )));
        }
        if let Some(last) = draws.last_mut().filter(|_| sweep > cfg.burn_in) {
            last.loglik = ll;
            last.log_posterior = ll + pr.log_density(last);
            if !last.log_posterior.is_finite() {
                return Err(Error::SamplerFailure(format!(
                    "non-finite posterior at sweep {sweep}"
                )));
            }
        }
        if sweep == cfg.run_length {
            break;
        }

        // Backward sampling of the latent path.
        states[n - 1] = categorical(&alpha[(n - 1) * k..], &mut rng);
        let mut w = vec![0.0; k];
        for t in (0..n - 1).rev() {
            let next = states[t + 1];
            for j in 0..k {
                w[j] = alpha[t * k + j] * trans[j * k + next];
            }
            states[t] = categorical(&w, &mut rng);
        }

        let mut counts = vec![0.0; k * k];
        for t in 1..n {
            counts[states[t - 1] * k + states[t]] += 1.0;
        }
        let mut n_k = vec![0usize; k];
        let mut sum_k = vec![0.0; k];
        let mut sq_k = vec![0.0; k];
        for (&s, &v) in states.iter().zip(&y) {
            n_k[s] += 1;
            sum_k[s] += v;
            sq_k[s] += v * v;
        }

        // Transition rows: Dirichlet proposal, corrected for p(m₁ | π(A)).
        if k > 1 {
            for i in 0..k {
                let conc: Vec<f64> = (0..k)
                    .map(|j| pr.concentration(i, j) + counts[i * k + j])
                    .collect();
                let row = dirichlet(&conc, &mut rng)?;
                let mut cand = trans.clone();
                cand[i * k..(i + 1) * k].copy_from_slice(&row);
                let pi_old = stationary_distribution(&trans, k)[states[0]];
                let pi_new = stationary_distribution(&cand, k)[states[0]];
                proposed[0] += 1;
                if rng.random::<f64>() * pi_old < pi_new {
                    trans = cand;
                    accepted[0] += 1;
                }
            }
        }

        // Means: conjugate normal proposal, corrected for the grid normalizer.
        for s in 0..k {
            let v = variances[s];
            let prec = 1.0 / pr.v0 + n_k[s] as f64 / v;
            let centre = (pr.m0 / pr.v0 + sum_k[s] / v) / prec;
            let cand = Normal::new(centre, prec.recip().sqrt())
                .map_err(|e| Error::SamplerFailure(e.to_string()))?
                .sample(&mut rng);
            let log_ratio = n_k[s] as f64
                * (log_grid_normalizer(&values, means[s], v)
                    - log_grid_normalizer(&values, cand, v));
            proposed[1] += 1;
            if rng.random::<f64>().ln() < log_ratio {
                means[s] = cand;
                accepted[1] += 1;
            }
        }

        // Variances: conjugate inverse-gamma proposal with the same correction.
        for s in 0..k {
            let m = means[s];
            let ss = (sq_k[s] - 2.0 * m * sum_k[s] + n_k[s] as f64 * m * m).max(0.0);
            let shape = pr.c0 + 0.5 * n_k[s] as f64;
            let rate = c_scale + 0.5 * ss;
            let g = Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::SamplerFailure(e.to_string()))?
                .sample(&mut rng);
            let cand = 1.0 / g;
            proposed[2] += 1;
            if !(cand >= pr.floor) {
                continue;
            }
            let weight = |s2: f64| {
                n_k[s] as f64 * (0.5 * s2.ln() - log_grid_normalizer(&values, means[s], s2))
            };
            if rng.random::<f64>().ln() < weight(cand) - weight(variances[s]) {
                variances[s] = cand;
                accepted[2] += 1;
            }
        }

        // Hierarchical scale.
        let inv_sum: f64 = variances.iter().map(|v| 1.0 / v).sum();
        c_scale = Gamma::new(pr.g0 + k as f64 * pr.c0, 1.0 / (pr.big_g0 + inv_sum))
            .map_err(|e| Error::SamplerFailure(e.to_string()))?
            .sample(&mut rng);

        let mut draw = Draw {
            trans: trans.clone(),
            means: means.clone(),
            variances: variances.clone(),
            loglik: 0.0,
            log_posterior: 0.0,
        };
        if cfg.permute && k > 1 {
            perm.shuffle(&mut rng);
            draw = draw.permuted(&perm);
            trans.clone_from(&draw.trans);
            means.clone_from(&draw.means);
            variances.clone_from(&draw.variances);
        }
        if sweep >= cfg.burn_in {
            draws.push(draw);
        }
    }

    let rate = |i: usize| {
        if proposed[i] > 0 {
            accepted[i] as f64 / proposed[i] as f64
        } else {
            1.0
        }
    };
    Ok(McmcChain {
        k,
        grid: grid.clone(),
        draws,
        config: *cfg,
        acceptance: [rate(0), rate(1), rate(2)],
    })
}

/// The stored draw with the largest log posterior; the earliest on ties.
pub fn posterior_mode(chain: &McmcChain) -> Result<HmmParams> {
    let mut best: Option<&Draw> = None;
    for d in &chain.draws {
        if best.is_none_or(|b| d.log_posterior > b.log_posterior) {
            best = Some(d);
        }
    }
    best.ok_or_else(|| Error::input("empty chain"))?
        .to_params(&chain.grid)
}
