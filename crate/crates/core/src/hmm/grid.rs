use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric grid of return levels `{-Ω, -(Ω-α), …, 0, …, Ω}`.
///
/// Stored as a tick size plus an integer number of steps on each side so
/// that `Ω` is always an exact multiple of `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TrendGrid {
    tick_size: f64,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    tick_size: f64,
    omega: f64,
}

impl TryFrom<GridRepr> for TrendGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        TrendGrid::new(r.tick_size, r.omega)
    }
}

impl From<TrendGrid> for GridRepr {
    fn from(g: TrendGrid) -> Self {
        GridRepr {
            tick_size: g.tick_size,
            omega: g.omega(),
        }
    }
}

impl TrendGrid {
    /// Build a grid from `α` and `Ω`; `Ω` must be a non-negative multiple of `α`.
    pub fn new(tick_size: f64, omega: f64) -> Result<Self> {
        if !(tick_size.is_finite() && tick_size > 0.0) {
            return Err(Error::param(format!(
                "tick size must be > 0, got {tick_size}"
            )));
        }
        if !(omega.is_finite() && omega >= 0.0) {
            return Err(Error::param(format!("omega must be >= 0, got {omega}")));
        }
        let ratio = omega / tick_size;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::param(format!(
                "omega {omega} is not a multiple of tick size {tick_size}"
            )));
        }
        Ok(TrendGrid {
            tick_size,
            steps: steps as usize,
        })
    }

    pub fn with_steps(tick_size: f64, steps: usize) -> Result<Self> {
        if !(tick_size.is_finite() && tick_size > 0.0) {
            return Err(Error::param(format!(
                "tick size must be > 0, got {tick_size}"
            )));
        }
        Ok(TrendGrid { tick_size, steps })
    }

    /// Smallest grid with spacing `tick_size` whose half-width covers `max |Δy|`.
    pub fn covering(returns: &[f64], tick_size: f64) -> Result<Self> {
        let max_abs = returns.iter().try_fold(0.0_f64, |m, &r| {
            if r.is_finite() {
                Ok(m.max(r.abs()))
            } else {
                Err(Error::input("non-finite return"))
            }
        })?;
        let steps = (max_abs / tick_size - 1e-9).ceil().max(0.0) as usize;
        Self::with_steps(tick_size, steps)
    }

    pub fn tick_size(&self) -> f64 {
        self.tick_size
    }

    pub fn omega(&self) -> f64 {
        self.steps as f64 * self.tick_size
    }

    /// Number of grid points, `2·Ω/α + 1`.
    pub fn len(&self) -> usize {
        2 * self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn value(&self, index: usize) -> f64 {
        (index as f64 - self.steps as f64) * self.tick_size
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }

    /// Index of the grid point nearest to `dy`; values beyond `±Ω` snap to the ends.
    pub fn snap(&self, dy: f64) -> Option<usize> {
        if !dy.is_finite() {
            return None;
        }
        let i = (dy / self.tick_size).round() + self.steps as f64;
        Some(i.clamp(0.0, (self.len() - 1) as f64) as usize)
    }

    /// Variance floor `α²/2`.
    pub fn variance_floor(&self) -> f64 {
        0.5 * self.tick_size * self.tick_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_are_symmetric_and_evenly_spaced() {
        let g = TrendGrid::new(0.25, 1.0).unwrap();
        let v = g.values();
        assert_eq!(v.len(), 9);
        assert_eq!(v, vec![-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]);
        for i in 0..v.len() {
            assert_eq!(v[i], -v[v.len() - 1 - i]);
        }
    }

    #[test]
    fn omega_must_be_multiple_of_tick() {
        assert!(TrendGrid::new(0.25, 0.3).is_err());
        assert!(TrendGrid::new(0.0, 1.0).is_err());
        assert!(TrendGrid::new(0.1, 0.3).is_ok());
    }

    #[test]
    fn snapping_clamps_to_ends() {
        let g = TrendGrid::new(0.25, 0.5).unwrap();
        assert_eq!(g.snap(0.0), Some(2));
        assert_eq!(g.snap(0.13), Some(3));
        assert_eq!(g.snap(-0.12), Some(2));
        assert_eq!(g.snap(7.0), Some(4));
        assert_eq!(g.snap(-7.0), Some(0));
        assert_eq!(g.snap(f64::NAN), None);
    }

    #[test]
    fn covering_grid_reaches_max_abs_return() {
        let g = TrendGrid::covering(&[0.1, -0.52, 0.3], 0.25).unwrap();
        assert_eq!(g.omega(), 0.75);
        let g = TrendGrid::covering(&[0.5], 0.25).unwrap();
        assert_eq!(g.omega(), 0.5);
        let g = TrendGrid::covering(&[0.0], 0.25).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn serde_uses_omega() {
        let g = TrendGrid::new(0.5, 2.0).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"tick_size":0.5,"omega":2.0}"#);
        let back: TrendGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }
}
