//! Mean-field theory solvers for gradient-descent dynamics of randomly
//! projected linear regression, with a Monte Carlo oracle.

pub mod anderson;
pub mod asymptotics;
pub mod causal;
pub mod cli;
pub mod config;
pub mod conv2d;
pub mod dmft_discrete;
pub mod dmft_fourier;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod roots;
pub mod sgd_online;
pub mod simulator;
pub mod spectrum;

pub use spectrum::{Coupling, LimitMode, Spectrum, SystemShape};
