#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod covariance;
pub mod diagnostics;
pub mod doe;
pub mod error;
pub mod kernelreg;
pub mod kriging;
pub mod model;
pub mod neuralnet;
pub mod optim;
pub mod testbed;

pub use error::{Error, Result};
