//! Delay-compensated backstepping control of mixed manual/ACC traffic on a
//! single road stretch: model, linearization, kernels, transformations,
//! controller, simulator and run harness.

// `!(x > 0.0)` is how NaN is rejected throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod linearize;
pub mod model;
pub mod simulator;
pub mod transforms;

pub use error::{Error, Result};
