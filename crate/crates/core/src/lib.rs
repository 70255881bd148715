//! Trapped-ion spin synchronization through a damped collective vibrational mode.
//!
//! The pipeline runs from crystal geometry to observables:
//!
//! 1. [`crystal`]: planar two-species lattice, transverse normal modes, Lamb-Dicke factors.
//! 2. [`cooling`]: Doppler damping of every mode by the coolant species.
//! 3. [`raman`]: effective two-level parameters of the Raman-driven spin ions,
//!    with a dissipative Schrieffer-Wolff reduction as an independent check.
//! 4. [`spinspin`]: coefficients of the spin-only master equation after the
//!    phonons are eliminated.
//! 5. [`langevin`]: c-number Langevin trajectories for large spin ensembles.
//! 6. [`exact`]: dense Liouvillian and permutation-symmetric solvers used as oracles.
//! 7. [`ramsey`]: Ramsey-sequence drivers, fringe decay fits and readout variance.
//!
//! All frequencies and rates are angular (rad/s) unless a name says otherwise.

pub mod consts;
pub mod cooling;
pub mod crystal;
pub mod error;
pub mod exact;
pub mod langevin;
pub mod raman;
pub mod ramsey;
pub mod spinspin;

pub use error::{Error, Result};

pub type C64 = num_complex::Complex64;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
