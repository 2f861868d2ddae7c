use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponential decay `λ` and window length `ψ` (in observations).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EwmaConfig {
    pub lambda: f64,
    pub window: usize,
}

impl Default for EwmaConfig {
    fn default() -> Self {
        EwmaConfig {
            lambda: 0.79,
            window: 100,
        }
    }
}

impl EwmaConfig {
    pub fn new(lambda: f64, window: usize) -> Result<Self> {
        let cfg = EwmaConfig { lambda, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::param(format!(
                "EWMA lambda must be in (0, 1), got {}",
                self.lambda
            )));
        }
        if self.window == 0 {
            return Err(Error::param("EWMA window must be at least 1"));
        }
        Ok(())
    }
}

/// One-step-ahead volatility forecasts.
///
/// Entry `t` is `σ_{t+1|t} = sqrt((1−λ) Σ_{τ=0}^{ψ} λ^τ Δy²_{t−τ})`, which needs
/// `ψ` lags before `t`; earlier entries are warm-up (`None`).
pub fn ewma_vol(returns: &[f64], cfg: &EwmaConfig) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    let psi = cfg.window;
    let weights: Vec<f64> = (0..=psi).map(|tau| cfg.lambda.powi(tau as i32)).collect();
    Ok((0..returns.len())
        .map(|t| {
            (t >= psi).then(|| {
                let s: f64 = weights
                    .iter()
                    .enumerate()
                    .map(|(tau, w)| w * returns[t - tau].powi(2))
                    .sum();
                ((1.0 - cfg.lambda) * s).sqrt()
            })
        })
        .collect())
}

/// Fast-over-slow volatility ratio aligned with `returns`: entry `t` uses only
/// returns before `t`. Undefined during warm-up and where the slow volatility is zero.
pub fn vol_ratio(
    returns: &[f64],
    lambda: f64,
    fast: usize,
    slow: usize,
) -> Result<Vec<Option<f64>>> {
    if fast == 0 || slow == 0 {
        return Err(Error::param("volatility windows must be positive"));
    }
    let f = ewma_vol(returns, &EwmaConfig::new(lambda, fast)?)?;
    let s = ewma_vol(returns, &EwmaConfig::new(lambda, slow)?)?;
    let mut out = vec![None; returns.len()];
    for t in 1..returns.len() {
        out[t] = match (f[t - 1], s[t - 1]) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
    }
    Ok(out)
}

/// Standardize returns with a trailing EWMA mean and variance (normalized
/// weights over the previous `ψ` observations). Undefined during warm-up and
/// where the variance estimate vanishes.
pub fn normalize_returns(
    returns: &[f64],
    mean_cfg: &EwmaConfig,
    vol_cfg: &EwmaConfig,
) -> Result<Vec<Option<f64>>> {
    mean_cfg.validate()?;
    vol_cfg.validate()?;
    let mean = trailing_moments(returns, mean_cfg);
    let second = trailing_moments(returns, vol_cfg);
    Ok((0..returns.len())
        .map(|t| {
            let (m, _) = mean[t]?;
            let (m_v, m2_v) = second[t]?;
            // variance about the vol-window mean, shifted to the mean-window centre
            let var = m2_v - 2.0 * m * m_v + m * m;
            let scale = m2_v.abs().max(m * m);
            if !(var > 1e-12 * scale) || scale == 0.0 {
                return None;
            }
            Some((returns[t] - m) / var.sqrt())
        })
        .collect())
}

/// Weighted first and second moments of `returns[t−ψ..t]`, weight `λ^τ` on lag `τ+1`.
fn trailing_moments(returns: &[f64], cfg: &EwmaConfig) -> Vec<Option<(f64, f64)>> {
    let lambda = cfg.lambda;
    let psi = cfg.window;
    let tail = lambda.powi(psi as i32);
    let norm = (1.0 - tail) / (1.0 - lambda);
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut out = Vec::with_capacity(returns.len());
    for t in 0..returns.len() {
        out.push((t >= psi).then(|| (s1 / norm, s2 / norm)));
        let y = returns[t];
        s1 = lambda * s1 + y;
        s2 = lambda * s2 + y * y;
        if t >= psi {
            let old = returns[t - psi];
            s1 -= tail * old;
            s2 -= tail * old * old;
        }
        // Refresh periodically so the running subtraction cannot drift.
        if t >= psi && (t + 1) % 4096 == 0 {
            let w = &returns[t + 1 - psi..=t];
            s1 = w
                .iter()
                .rev()
                .enumerate()
                .map(|(i, y)| lambda.powi(i as i32) * y)
                .sum();
            s2 = w
                .iter()
                .rev()
                .enumerate()
                .map(|(i, y)| lambda.powi(i as i32) * y * y)
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_returns_give_zero_vol() {
        let v = ewma_vol(&[0.0; 30], &EwmaConfig::new(0.79, 10).unwrap()).unwrap();
        assert!(v[..10].iter().all(Option::is_none));
        assert!(v[10..].iter().all(|x| *x == Some(0.0)));
    }

    #[test]
    fn constant_returns_match_geometric_sum() {
        for psi in [50, 100] {
            let cfg = EwmaConfig::new(0.79, psi).unwrap();
            let c = -0.003;
            let v = ewma_vol(&vec![c; 300], &cfg).unwrap();
            let expect = c.abs() * (1.0 - 0.79_f64.powi(psi as i32 + 1)).sqrt();
            assert!((v[299].unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_recent_impulse() {
        let mut r = vec![0.0; 120];
        r[119] = 0.02;
        let v = ewma_vol(&r, &EwmaConfig::new(0.79, 50).unwrap()).unwrap();
        assert!((v[119].unwrap() - 0.02 * (1.0_f64 - 0.79).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ratio_of_constant_returns() {
        let x = vol_ratio(&[0.001; 400], 0.79, 50, 100).unwrap();
        assert!(x[100].is_none());
        let expect = ((1.0 - 0.79_f64.powi(51)) / (1.0 - 0.79_f64.powi(101))).sqrt();
        assert!((x[101].unwrap() - expect).abs() < 1e-12);
        assert!(vol_ratio(&[0.0; 400], 0.79, 50, 100)
            .unwrap()
            .iter()
            .all(Option::is_none));
    }

    #[test]
    fn ratio_rises_when_recent_returns_grow() {
        // The slow sum contains every term of the fast one, so the ratio is
        // at most 1; scaling up the recent window moves it toward 1.
        let sign = |t: usize| if t % 2 == 0 { 1.0 } else { -1.0 };
        let base: Vec<f64> = (0..401).map(|t| 0.001 * sign(t)).collect();
        let scaled: Vec<f64> = (0..401)
            .map(|t| if t >= 350 { 2.0 } else { 1.0 } * base[t])
            .collect();
        let lo = vol_ratio(&base, 0.97, 50, 100).unwrap()[400].unwrap();
        let hi = vol_ratio(&scaled, 0.97, 50, 100).unwrap()[400].unwrap();
        assert!(hi > lo && hi <= 1.0);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(EwmaConfig::new(1.0, 5).is_err());
        assert!(EwmaConfig::new(0.5, 0).is_err());
    }

    #[test]
    fn constant_input_cannot_be_normalized() {
        let cfg = EwmaConfig::new(0.9, 20).unwrap();
        let z = normalize_returns(&[0.5; 200], &cfg, &cfg).unwrap();
        assert!(z.iter().all(Option::is_none));
    }

    #[test]
    fn trailing_moments_match_direct_sum() {
        let r: Vec<f64> = (0..10_000)
            .map(|i| ((i * 37 % 101) as f64 - 50.0) * 1e-3)
            .collect();
        let cfg = EwmaConfig::new(0.99, 500).unwrap();
        let m = trailing_moments(&r, &cfg);
        for t in [500, 4095, 4096, 4097, 9999] {
            let w: f64 = (0..500).map(|i| 0.99_f64.powi(i)).sum();
            let s1: f64 = (0..500)
                .map(|i| 0.99_f64.powi(i) * r[t - 1 - i as usize])
                .sum();
            let (a, _) = m[t].unwrap();
            assert!((a - s1 / w).abs() < 1e-12, "t={t}");
        }
    }
}
