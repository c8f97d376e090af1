//! Configuration, output files, sweeps and verification reports.

pub mod config;
pub mod output;
pub mod run;
pub mod sweep;
pub mod units;
pub mod verify;
