//! Trend-state HMM: return grid, discretized-Gaussian emissions, and the
//! forward filter used for one-step-ahead return prediction.
//!
//! Observations are snapped to the nearest grid point before the emission
//! lookup, so every likelihood in the crate is a probability mass on the grid.

mod emission;
mod filter;
mod grid;
mod params;

pub use emission::discretized_gaussian_pmf;
pub use filter::{
    filter_step, init_filter, log_likelihood, predict_return, run_hmm_signal, FilterState,
    SignalSeries, TransferFunction,
};
pub use grid::TrendGrid;
pub use params::{stationary_distribution, HmmParams};

pub(crate) use emission::log_pmf;
pub(crate) use filter::run_signal_with;
