//! Elastic, fault-tolerant ensemble data assimilation.
//!
//! A server holds the ensemble and computes the EnKF update; runners
//! advance members between analyses; a launcher keeps both alive.

pub mod checkpoint;
pub mod config;
pub mod da;
pub mod error;
pub mod launcher;
pub mod metrics;
pub mod models;
pub mod observations;
pub mod partition;
pub mod protocol;
pub mod reference;
pub mod report;
pub mod runner;
pub mod rng;
pub mod scheduler;
pub mod server;

pub use error::{Error, Result};
