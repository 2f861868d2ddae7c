//! Tick ingestion, synthetic markets, look-ahead-safe strategy simulation,
//! and performance reporting.

mod data;
mod sim;
mod synthetic;

pub use data::{ingest_ticks, to_returns, BarSeries, Instrument, ReturnSeries, TradingDay};
pub use sim::{
    correlation, decisions_from_forecasts, sharpe, simulate, BacktestReport, CostModel,
    DecisionSeries, StrategyReport, StrategyReturns, TRADING_DAYS,
};
pub use synthetic::{
    generate_synthetic, simulate_input_returns, simulate_returns, InputDependence, InputProcess,
    SyntheticMarket, SyntheticSpec, RETURNS_PER_DAY,
};
