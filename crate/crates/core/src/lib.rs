// `!(x > 0.0)` is used throughout to reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod blr;
pub mod data;
pub mod error;
pub mod federated;
pub mod kernels;
pub mod linalg;
pub mod messages;
pub mod metrics;
pub mod params;

pub use error::{FedError, Result};
