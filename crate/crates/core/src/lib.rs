//! Hourly demand forecasting by seasonal decomposition.
//!
//! The STL cascade splits a series into per-period seasonal components and a
//! trend. Elman networks predict the seasonals, an ARIMA model predicts the
//! trend, and the forecasts add back up to demand. [`eval`] scores repeated
//! runs and compares models with the Wilcoxon signed-rank test.

pub mod arima;
pub mod elman;
pub mod eval;
pub mod loess;
pub mod pipeline;
pub mod stl;
pub mod timeseries;
