//! Relaxed membrane densities for linear-growth energies with bending moments.
//!
//! The crate computes the cell-problem density `Q*W`, its recession and the
//! surface density `γ` by discretized minimization over periodic fields,
//! evaluates the limit membrane functional on structured BV deformations
//! paired with Radon bending measures, and checks convergence of the scaled
//! 3D energies on slab grids.

pub mod cell;
pub mod energy;
pub mod envelope;
pub mod error;
pub mod integrand;
pub mod membrane;
pub mod optim;
pub mod planar;
pub mod tensor;
pub mod thin_film;
pub mod verify;

pub use energy::{Constants, EnergyDensity, ModelDocument, ModelKind};
pub use error::{Error, Result};
pub use tensor::{CosseratVector, FullMatrix, PlanarMatrix};
