use serde::{Deserialize, Serialize};

use super::emission::{log_pmf, pmf_mean};
use super::grid::TrendGrid;
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Learned model `Θ = {A, π, φ}` over a trend grid.
///
/// The per-state log-pmf table over the grid and the discretized means `μ*`
/// are computed once at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct HmmParams {
    k: usize,
    trans: Vec<f64>,
    initial: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    grid: TrendGrid,
    // K × G, row-major
    log_emission: Vec<f64>,
    disc_means: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    k: usize,
    a: Vec<Vec<f64>>,
    pi: Vec<f64>,
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    alpha: f64,
    omega: f64,
}

impl TryFrom<ParamsRepr> for HmmParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let grid = TrendGrid::new(r.alpha, r.omega)?;
        let p = HmmParams::new(r.a, r.pi, r.mu, r.sigma2, grid)?;
        if p.k != r.k {
            return Err(Error::param(format!(
                "k = {} but {} states given",
                r.k, p.k
            )));
        }
        Ok(p)
    }
}

impl From<HmmParams> for ParamsRepr {
    fn from(p: HmmParams) -> Self {
        ParamsRepr {
            k: p.k,
            a: p.transition_matrix(),
            pi: p.initial,
            mu: p.means,
            sigma2: p.variances,
            alpha: p.grid.tick_size(),
            omega: p.grid.omega(),
        }
    }
}

impl HmmParams {
    pub fn new(
        transition: Vec<Vec<f64>>,
        initial: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        grid: TrendGrid,
    ) -> Result<Self> {
        let k = initial.len();
        if k == 0 {
            return Err(Error::param("at least one state required"));
        }
        if transition.len() != k || transition.iter().any(|row| row.len() != k) {
            return Err(Error::param(format!("transition matrix must be {k}×{k}")));
        }
        let trans: Vec<f64> = transition.into_iter().flatten().collect();
        Self::from_flat(trans, initial, means, variances, grid)
    }

    /// Same as [`HmmParams::new`] with a row-major `K×K` transition buffer.
    pub fn from_flat(
        trans: Vec<f64>,
        initial: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        grid: TrendGrid,
    ) -> Result<Self> {
        let k = initial.len();
        if k == 0 || trans.len() != k * k || means.len() != k || variances.len() != k {
            return Err(Error::param("inconsistent state counts"));
        }
        for (i, row) in trans.chunks(k).enumerate() {
            check_distribution(row, &format!("row {i} of A"))?;
        }
        check_distribution(&initial, "pi")?;
        let floor = grid.variance_floor();
        for (j, (&m, &v)) in means.iter().zip(&variances).enumerate() {
            if !m.is_finite() {
                return Err(Error::param(format!("mu[{j}] is not finite")));
            }
            if !(v.is_finite() && v >= floor * (1.0 - 1e-12)) {
                return Err(Error::param(format!(
                    "sigma2[{j}] = {v:e} is below the variance floor {floor:e}"
                )));
            }
        }
        let g = grid.len();
        let mut log_emission = Vec::with_capacity(k * g);
        let mut disc_means = Vec::with_capacity(k);
        for (&m, &v) in means.iter().zip(&variances) {
            let lp = log_pmf(&grid, m, v)?;
            disc_means.push(pmf_mean(&grid, &lp));
            log_emission.extend(lp);
        }
        Ok(HmmParams {
            k,
            trans,
            initial,
            means,
            variances,
            grid,
            log_emission,
            disc_means,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> &TrendGrid {
        &self.grid
    }

    /// `a_{from,to}`.
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.trans[from * self.k + to]
    }

    pub fn transition_row(&self, from: usize) -> &[f64] {
        &self.trans[from * self.k..(from + 1) * self.k]
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.trans
    }

    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        self.trans.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Means of the grid-renormalized emission pmfs, `μ*_k`.
    pub fn discretized_means(&self) -> &[f64] {
        &self.disc_means
    }

    /// `log φ_k` over the grid.
    pub fn log_emission_row(&self, state: usize) -> &[f64] {
        let g = self.grid.len();
        &self.log_emission[state * g..(state + 1) * g]
    }

    pub fn log_emission(&self, state: usize, grid_index: usize) -> f64 {
        self.log_emission[state * self.grid.len() + grid_index]
    }

    /// Relabel states so that new state `j` is old state `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<HmmParams> {
        let k = self.k;
        if perm.len() != k || {
            let mut seen = vec![false; k];
            perm.iter()
                .any(|&p| p >= k || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::param("not a permutation"));
        }
        let mut trans = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                trans[i * k + j] = self.transition(perm[i], perm[j]);
            }
        }
        Self::from_flat(
            trans,
            perm.iter().map(|&p| self.initial[p]).collect(),
            perm.iter().map(|&p| self.means[p]).collect(),
            perm.iter().map(|&p| self.variances[p]).collect(),
            self.grid.clone(),
        )
    }

    /// Stationary distribution of `A` (left eigenvector for eigenvalue 1).
    pub fn stationary_distribution(&self) -> Vec<f64> {
        stationary_distribution(&self.trans, self.k)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::param(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::param(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Stationary distribution of a row-stochastic `K×K` matrix, solving
/// `πᵀ(A − I) = 0` with `Σπ = 1` by Gaussian elimination.
pub fn stationary_distribution(trans: &[f64], k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    // Rows of the system: (Aᵀ − I) with the last equation replaced by Σπ = 1.
    let mut m = vec![0.0; k * (k + 1)];
    for i in 0..k {
        for j in 0..k {
            m[i * (k + 1) + j] = trans[j * k + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..k {
        m[(k - 1) * (k + 1) + j] = 1.0;
    }
    m[(k - 1) * (k + 1) + k] = 1.0;
    let w = k + 1;
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| m[a * w + col].abs().total_cmp(&m[b * w + col].abs()))
            .unwrap();
        if m[piv * w + col].abs() < 1e-300 {
            // reducible chain; fall back to uniform
            return vec![1.0 / k as f64; k];
        }
        if piv != col {
            for c in 0..w {
                m.swap(piv * w + c, col * w + c);
            }
        }
        let d = m[col * w + col];
        for r in 0..k {
            if r != col {
                let f = m[r * w + col] / d;
                if f != 0.0 {
                    for c in col..w {
                        m[r * w + c] -= f * m[col * w + c];
                    }
                }
            }
        }
    }
    let mut pi: Vec<f64> = (0..k)
        .map(|i| (m[i * w + k] / m[i * w + i]).max(0.0))
        .collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    pi
}
