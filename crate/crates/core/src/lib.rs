//! Effective-field modeling, spin-echo readout and coupling-spectrum
//! inference for a velocity-dependent spin-nucleon interaction sourced by a
//! vibrating macroscopic mass.
//!
//! Pipeline: point kernels ([`kernels`]) are integrated over the half-ball
//! source ([`field`]), converted into echo observables ([`echo`]), and fed
//! into velocity/distance fits and sensitivity curves ([`inference`]).
//! Background fields are bounded in [`background`]. [`config`] and the
//! `spinforce` binary wire everything to a TOML configuration file.

pub mod background;
pub mod config;
pub mod constants;
pub mod echo;
pub mod error;
pub mod field;
pub mod geometry;
pub mod inference;
pub mod kernels;
pub mod output;
pub mod quadrature;
pub mod vec3;

pub use constants::PhysicalConstants;
pub use error::{Error, Result};
pub use vec3::Vec3;
