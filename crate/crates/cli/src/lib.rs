//! Experiment runner for the federated Bayesian regression library: JSON
//! experiment configs, multi-seed runs with per-seed records, the
//! two-client synthetic study and Monte-Carlo kernel checks.

pub mod config;
mod error;
pub mod experiment;
pub mod fig2;
pub mod kernel_check;

pub use error::CliError;
