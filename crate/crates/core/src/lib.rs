//! Regime-switching momentum engine.
//!
//! A latent trend state drives noisy intraday returns. The crate learns the
//! model (piecewise linear regression, Baum-Welch, or Gibbs sampling with
//! bridge-sampling model selection), optionally conditions it on exogenous
//! side information through zero-mean splines, and turns forward-filter
//! predictions into trading signals that are evaluated with a look-ahead-safe
//! backtest.

pub mod backtest;
pub mod baum_welch;
pub mod error;
pub mod hmm;
pub mod iohmm;
pub mod mcmc;
pub mod plr;
pub mod side_info;

mod math;

pub use error::{Error, Result};
pub use hmm::{HmmParams, SignalSeries, TransferFunction, TrendGrid};
