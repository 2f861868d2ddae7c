use super::grid::TrendGrid;
use crate::error::{Error, Result};
use crate::math::log_sum_exp;

/// Normal density at each grid point, renormalized over the grid.
pub fn discretized_gaussian_pmf(grid: &TrendGrid, mu: f64, sigma2: f64) -> Result<Vec<f64>> {
    Ok(log_pmf(grid, mu, sigma2)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

pub(crate) fn log_pmf(grid: &TrendGrid, mu: f64, sigma2: f64) -> Result<Vec<f64>> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::param(format!("sigma2 must be > 0, got {sigma2}")));
    }
    if !mu.is_finite() {
        return Err(Error::param("mu must be finite"));
    }
    // The 1/sqrt(2πσ²) factor cancels in the normalization.
    let mut lp: Vec<f64> = (0..grid.len())
        .map(|i| {
            let d = grid.value(i) - mu;
            -0.5 * d * d / sigma2
        })
        .collect();
    let z = log_sum_exp(&lp);
    lp.iter_mut().for_each(|x| *x -= z);
    Ok(lp)
}

/// Mean of a pmf given in log space over the grid.
pub(crate) fn pmf_mean(grid: &TrendGrid, log_pmf: &[f64]) -> f64 {
    log_pmf
        .iter()
        .enumerate()
        .map(|(i, lp)| grid.value(i) * lp.exp())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_grid_matches_direct_normalization() {
        let g = TrendGrid::new(0.25, 0.25).unwrap();
        let p = discretized_gaussian_pmf(&g, 0.0, 0.0625).unwrap();
        let e = (-0.5f64).exp();
        let z = 1.0 + 2.0 * e;
        assert!((p[1] - 1.0 / z).abs() < 1e-15);
        assert!((p[0] - e / z).abs() < 1e-15);
        assert!((p[2] - e / z).abs() < 1e-15);
    }

    #[test]
    fn symmetric_about_zero_mean() {
        let g = TrendGrid::new(0.25, 0.25).unwrap();
        for s2 in [0.001, 0.1, 10.0] {
            let p = discretized_gaussian_pmf(&g, 0.0, s2).unwrap();
            assert_eq!(p[0], p[2]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_grid_has_unit_mass() {
        let g = TrendGrid::new(0.25, 0.0).unwrap();
        assert_eq!(discretized_gaussian_pmf(&g, 3.0, 0.5).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_non_positive_variance() {
        let g = TrendGrid::new(0.25, 0.25).unwrap();
        assert!(matches!(
            discretized_gaussian_pmf(&g, 0.0, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(discretized_gaussian_pmf(&g, 0.0, -1.0).is_err());
    }

    #[test]
    fn far_off_grid_mean_still_normalizes() {
        let g = TrendGrid::new(0.25, 1.0).unwrap();
        let p = discretized_gaussian_pmf(&g, 50.0, 1e-4).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[8], 1.0);
    }
}
