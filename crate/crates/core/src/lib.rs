//! Physics-informed LSTM for forecasting and reconstructing the Lorenz-96
//! system from partial observations.
//!
//! - [`dynamics`]: Lorenz-96 right-hand side, Jacobian, Euler trajectories, observation splits.
//! - [`lyapunov`]: QR (modified Gram-Schmidt) and Benettin spectra of discrete maps.
//! - [`network`]: the LSTM cell, readout, open/closed loop and the closed-loop Jacobian.
//! - [`training`]: data-driven and physics losses, BPTT, Adam, early stopping, sweeps.
//! - [`evaluation`]: closed-loop statistics, PDFs, Wasserstein distances, spectrum comparison.
//! - [`cli`]: the `generate | train | sweep | lyapunov | evaluate` commands behind the `pilstm` binary.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod lyapunov;
pub mod network;
pub mod training;

pub use error::{Error, Result};
