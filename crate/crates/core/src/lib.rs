//! Optimal-control "grating" spectroscopy for a scanning two-level sensor.
//!
//! The crate is `no_std` (with `alloc`) so the numerics can be embedded
//! anywhere; the default `std` feature only switches the per-grid-point and
//! per-pixel loops onto rayon. Parallel loops always collect in index order
//! and reduce sequentially, so results are bitwise identical for any worker
//! count.
//!
//! Modules:
//! - [`bloch`]: exact Bloch-vector propagation under piecewise-constant
//!   controls and Gaussian inhomogeneous broadening.
//! - [`grape`]: grating targets, infidelity, adjoint gradients and the
//!   projected gradient optimizer.
//! - [`sensitivity`]: the shot-noise sensitivity model and its optimum.
//! - [`fieldmodel`]: monopole / pseudopole tip fields, scan maps and fits.
//! - [`imaging`]: fringe-image simulation and inversion back to field maps.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bloch;
pub mod error;
pub mod fieldmodel;
pub mod grape;
pub mod imaging;
pub mod sensitivity;

mod math;
mod par;

pub use error::{Error, Result};
pub use math::Vec3;

/// Hz -> rad/s.
pub const TWO_PI: f64 = core::f64::consts::TAU;

/// NV gyromagnetic ratio, 28 MHz/mT, in Hz per tesla.
pub const NV_GAMMA_HZ_PER_T: f64 = 28.0e9;
