//! Deterministic particle solver for kinetic plasma equations with stiff
//! Landau and Dougherty collision operators. Collisions are treated fully
//! implicitly through variational (dynamic JKO) steps with a trainable
//! velocity field, uniformly in the Knudsen number.

pub mod config;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod heatlab;
pub mod innertime;
pub mod jko;
pub mod splitting;
pub mod kernels;
pub mod riemann;
pub mod runner;

pub use error::{Error, Result};
