//! Numerical toolkit for the Ginzburg-Landau energy of a magnetic-periodic cell
//! at fixed applied field, in the regime of small `b`.

pub mod analysis;
pub mod energy;
pub mod error;
pub mod grid;
pub mod snapshot;
pub mod sum;
pub mod minimize;
pub mod trial;
pub mod vortices;

pub use energy::{density_moments, energy, gradient, DiscreteField, EnergyBreakdown, Functional};
pub use error::{GlError, Result};
pub use grid::{build_grid, link_phases, wrap_value, Boundary, CellConfig, Grid, WrapRule};
