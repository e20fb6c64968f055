//! Simulation and analysis toolkit for frequency-multiplexed dispersive qubit
//! readout through individually Purcell-filtered readout resonators.
//!
//! The crate is organised bottom-up:
//!
//! * [`circuit`] evaluates the coupled filter/resonator input-output network in
//!   the frequency domain (scattering parameters, effective linewidths, Purcell
//!   limited lifetimes, steady-state photon numbers).
//! * [`geometry`] predicts quarter-wave resonator frequencies from layout
//!   parameters by solving the boundary-condition equations.
//! * [`dynamics`] propagates the two-mode equations of motion under pulsed
//!   drives and derives measurement-induced dephasing, including the crosstalk
//!   matrix between chains.
//! * [`signal`] and [`shots`] build matched filters, synthesise single-shot
//!   records with decay, mixing and thermal errors, and analyse histograms.
//! * [`analysis`] aggregates multiplexed shots into assignment, cross-fidelity
//!   and correlation matrices and assembles reports.
//! * [`fitting`] recovers chain parameters from transmission spectra.
//! * [`experiment`] runs the device end to end and assembles reports.
//! * [`config`] holds the boundary-unit device description (GHz, MHz, ns).
//!
//! All frequencies and rates inside the crate are angular (rad/s); times are in
//! seconds. Conversion happens only in [`units`] and [`config`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod circuit;
pub mod config;
pub mod dynamics;
pub mod experiment;
mod error;
pub mod fitting;
pub mod geometry;
pub mod shots;
pub mod signal;
pub mod units;

pub use error::{Error, Result};
pub use num_complex::Complex64;
