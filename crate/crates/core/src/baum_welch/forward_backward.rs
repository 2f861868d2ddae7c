use crate::error::{Error, Result};
use crate::hmm::HmmParams;

/// Scaled forward-backward quantities for one sequence.
///
/// `alpha` rows are the filtering distributions `p(m_t | Δy_{1:t})`; `beta`
/// rows are backward messages rescaled to max 1 at each step; `gamma` rows are
/// the smoothed marginals `p(m_t | Δy_{1:T})`. All matrices are `T × K`,
/// row-major.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub k: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Expected transition counts `Σ_t ξ_t(j, k)`, row-major `K × K`.
    pub transition_counts: Vec<f64>,
    pub loglik: f64,
}

impl ForwardBackward {
    pub fn len(&self) -> usize {
        self.gamma.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn gamma_row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.k..(t + 1) * self.k]
    }

    pub fn alpha_row(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.k..(t + 1) * self.k]
    }
}

pub(crate) fn snap_all(data: &[f64], params: &HmmParams) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(t, &dy)| {
            params
                .grid()
                .snap(dy)
                .ok_or(Error::DegenerateLikelihood { t })
        })
        .collect()
}

pub fn forward_backward(data: &[f64], params: &HmmParams) -> Result<ForwardBackward> {
    if data.is_empty() {
        return Err(Error::input("empty return series"));
    }
    let idx = snap_all(data, params)?;
    forward_backward_indexed(&idx, params)
}

pub(crate) fn forward_backward_indexed(
    idx: &[usize],
    params: &HmmParams,
) -> Result<ForwardBackward> {
    let k = params.k();
    let n = idx.len();
    let a = params.transition_flat();
    let mut alpha = vec![0.0; n * k];
    let mut loglik = 0.0;
    let mut w = vec![0.0; k];
    let mut pred = params.initial().to_vec();

    for t in 0..n {
        if t > 0 {
            pred.iter_mut().for_each(|p| *p = 0.0);
            let prev = &alpha[(t - 1) * k..t * k];
            for (j, &aj) in prev.iter().enumerate() {
                if aj == 0.0 {
                    continue;
                }
                for (p, &ajk) in pred.iter_mut().zip(&a[j * k..(j + 1) * k]) {
                    *p += aj * ajk;
                }
            }
        }
        for s in 0..k {
            w[s] = pred[s].ln() + params.log_emission(s, idx[t]);
        }
        let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::DegenerateLikelihood { t });
        }
        let z: f64 = w.iter().map(|x| (x - m).exp()).sum();
        let norm = m + z.ln();
        loglik += norm;
        for s in 0..k {
            alpha[t * k + s] = (w[s] - norm).exp();
        }
    }

    let mut beta = vec![0.0; n * k];
    let mut gamma = vec![0.0; n * k];
    let mut counts = vec![0.0; k * k];
    beta[(n - 1) * k..].iter_mut().for_each(|b| *b = 1.0);
    let mut b_next = vec![0.0; k];
    for t in (0..n).rev() {
        if t + 1 < n {
            // e_{t+1}(s) β̃_{t+1}(s), emission scaled by its max over states
            let row = idx[t + 1];
            let m = (0..k)
                .map(|s| params.log_emission(s, row))
                .fold(f64::NEG_INFINITY, f64::max);
            for s in 0..k {
                b_next[s] = (params.log_emission(s, row) - m).exp() * beta[(t + 1) * k + s];
            }
            let mut denom = 0.0;
            let mut bmax = 0.0_f64;
            for j in 0..k {
                let sj: f64 = a[j * k..(j + 1) * k]
                    .iter()
                    .zip(&b_next)
                    .map(|(x, y)| x * y)
                    .sum();
                beta[t * k + j] = sj;
                denom += alpha[t * k + j] * sj;
                bmax = bmax.max(sj);
            }
            if !(denom > 0.0 && denom.is_finite()) {
                return Err(Error::DegenerateLikelihood { t: t + 1 });
            }
            for j in 0..k {
                let aj = alpha[t * k + j] / denom;
                if aj == 0.0 {
                    continue;
                }
                for s in 0..k {
                    counts[j * k + s] += aj * a[j * k + s] * b_next[s];
                }
            }
            beta[t * k..(t + 1) * k].iter_mut().for_each(|b| *b /= bmax);
        }
        let mut z = 0.0;
        for s in 0..k {
            let g = alpha[t * k + s] * beta[t * k + s];
            gamma[t * k + s] = g;
            z += g;
        }
        if !(z > 0.0) {
            return Err(Error::DegenerateLikelihood { t });
        }
        gamma[t * k..(t + 1) * k].iter_mut().for_each(|g| *g /= z);
    }

    Ok(ForwardBackward {
        k,
        alpha,
        beta,
        gamma,
        transition_counts: counts,
        loglik,
    })
}
