//! Spectral toolkit for alpha-effect instabilities of periodic flows and the
//! modal eigenvalue problem of the kinematic dynamo equation on the 3-torus.
//!
//! Modules build bottom-up: [`field`] holds truncated Fourier fields,
//! [`alpha`] solves the cell problem and the alpha-matrix, [`modal`]
//! discretizes `L(j, ε)` and its spectral projectors, [`evolve`] time-steps
//! the modal equation, [`bloch`] synthesizes whole-space data from bands of
//! modal solutions, [`glue`] assembles the localized whole-space flow, and
//! [`io`] reads and writes binary snapshots.

pub mod error;
pub mod fft;
pub mod field;
pub mod linalg;
pub mod alpha;
pub mod modal;
pub mod evolve;
pub mod bloch;
pub mod glue;
pub mod io;

pub use error::{Error, Result};

/// Double-precision complex scalar used throughout.
pub type C64 = num_complex::Complex64;
