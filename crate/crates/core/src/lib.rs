//! Sparse additive structure detection for continuous-time nonlinear ODEs.
//!
//! A nonlinear system is linearized along a large operating trajectory, the
//! resulting LPV coefficient field is estimated in a curl-free RKHS from
//! frequency-domain data, and the support of the estimated gradient and
//! Hessian reveals which inputs the system depends on and how they group.

pub mod artifacts;
pub mod error;
pub mod estimators;
pub mod freq_model;
pub mod kernels;
pub mod pipeline;
pub mod signals;
pub mod simulator;
pub mod structure;

pub use error::{Error, ErrorKind, Result};
