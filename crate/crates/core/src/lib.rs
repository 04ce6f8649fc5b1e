//! Probabilistic forecasting of hourly global horizontal irradiance.
//!
//! Individual forecasters ([`gp`], [`dgp`], [`bsts`], [`gbr`]), quantile
//! combiners ([`quantile`], [`aggregate`]), variable selection ([`varsel`])
//! and evaluation ([`scoring`]) over a shared [`dataset::TimeSeriesFrame`].

pub mod aggregate;
pub mod bsts;
pub mod dataset;
pub mod dgp;
pub mod error;
pub mod gbr;
pub mod gp;
pub mod linalg;
pub mod optim;
pub mod quantile;
pub mod scoring;
pub mod varsel;

pub use error::{Error, Result};
