//! Mixed quantum-classical dynamics on lattices, with both the quantum
//! state and the classical coordinates free to live in any unitary working
//! basis — site, wavevector, or electronic eigenbasis — and to be truncated
//! there.
//!
//! The classical modes are held as complex coordinates
//! `z_n = sqrt(m h / 2) (q_n + i p_n / (m h))`, which makes a unitary
//! change of basis act identically on wavefunction components and on
//! classical coordinates, and makes basis truncation a plain projection
//! for both. Two propagators share the machinery: fewest-switches surface
//! hopping and mean-field (Ehrenfest) dynamics, co-integrated with RK4 and
//! sampled from a Boltzmann distribution over the modes.
//!
//! Module map:
//! - [`coords`]: canonical/complex coordinate maps, unitary bases, labels,
//!   transforms, and realized-real wavevector frames.
//! - [`classical`]: kinetic/spring kernels, potentials, equations of
//!   motion, and the classical Hamiltonian.
//! - [`quantum`]: working-frame operator compression, adiabatic
//!   decomposition with continuous phase alignment, and state transforms.
//! - [`model`]: lattice parameters, electronic Hamiltonians and spectra,
//!   truncation rules, presets.
//! - [`fssh`]: hop probabilities, momentum rescaling, and hop records.
//! - [`ensemble`]: trajectory integration, deterministic parallel
//!   ensembles, and recorded observables.
//! - [`cli`]: the `zhop` binary — config resolution, run artifacts with
//!   checksums, compare/plotdata post-processing.
//!
//! Runnable examples (`cargo run --example <name>`):
//! - `coordinate_geometry` — the circle/ellipse geometry of the complex
//!   coordinate map for one harmonic mode.
//! - `reciprocal_basis` — wavevector labels, round trips, realized-real
//!   frames, and what a smallest-|k| truncation keeps.
//! - `impurity_spectrum` — the cosine band, the impurity bound state, and
//!   participation ratios on 100 sites.
//! - `mean_field_energy` — energy bookkeeping along one mean-field
//!   trajectory.
//! - `pristine_truncation` — k=0 population decay with half the
//!   wavevector basis discarded.
//! - `impurity_bases` — the same truncation in the right basis (electronic
//!   eigenstates) and the wrong one (wavevectors), side by side.

// Guards written as `!(x > 0.0)` deliberately reject NaN alongside the
// out-of-range values; the clippy rewrite would silently accept NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classical;
pub mod cli;
pub mod coords;
pub mod ensemble;
pub mod error;
pub mod fssh;
pub mod model;
pub mod quantum;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

/// Double-precision complex number used throughout.
pub type C64 = num_complex::Complex64;
