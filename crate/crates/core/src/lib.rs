//! Grouped bandpass recurrent networks for multi-timescale forecasting.
//!
//! The recurrent layer is split into `K` groups of `N` neurons. Each neuron is
//! a pair of leaky integrators whose difference passes a frequency band; the
//! two cutoff parameters are shared per group and learned by truncated
//! backpropagation through time together with a linear readout, while the
//! input and recurrent weights stay fixed at their random initialization.
//!
//! Module map:
//!
//! - [`timeseries`]: multiple superimposed oscillator signals, noise, Welch
//!   spectra, peak counting, supervised datasets and NRMSE.
//! - [`topology`]: block-structured random recurrent matrices and spectral
//!   radius rescaling.
//! - [`model`]: forward dynamics of bandpass (TORNN), leaky ESN and Elman cells.
//! - [`training`]: truncated BPTT, Adam, early stopping, gradient checking.
//! - [`esnfit`]: ridge readout and genetic hyperparameter search for the ESN.
//! - [`bench`]: experiment orchestration, summaries and plot data.

pub mod bench;
pub mod error;
pub mod esnfit;
pub mod model;
pub mod rng;
pub mod timeseries;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
