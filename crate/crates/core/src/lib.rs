//! Delay-based feedback watermarking for detecting replay attacks on LQG
//! control loops.
//!
//! The crate covers gain synthesis ([`synthesis`]), seeded simulation of the
//! watermarked loop under attack ([`sim`]), stability checks of the delayed
//! closed loop ([`stability`]), the stationary covariance of the attacked
//! loop and the predicted detector statistic ([`covariance`]), and the
//! chi-squared detector with cost accounting ([`detect`]).
//!
//! Experiments are described by TOML files ([`config`]) and run through
//! [`experiment`], which writes traces, detector series and a manifest.
//! [`checks`] holds the end-to-end reproduction criteria.

pub mod checks;
pub mod config;
pub mod covariance;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod sim;
pub mod stability;
pub mod stats;
pub mod synthesis;

pub use error::{Error, Result};
pub use linalg::{Matrix, SolverOptions, Vector};
