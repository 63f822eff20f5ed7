//! Nonlocal interaction dynamics on localizing weighted graphs.
//!
//! The crate is organized around a graph `(mu, eta)` whose vertices are
//! points in `R^d` carrying base-measure weights and whose edge weights come
//! from a rescaled reference connectivity. On top of that sit:
//!
//! - [`geometry`]: graph construction, assumption validation, the
//!   per-scale tensor and its local limit, and the metric it induces;
//! - [`calculus`]: nonlocal gradients/divergences, convolutions, velocity
//!   fields and the upwind flux interpolation;
//! - [`dynamics`]: explicit upwind time stepping for the graph equation and
//!   a donor-cell finite-volume reference solver for the limiting
//!   tensor-mobility equation;
//! - [`energetics`]: interaction energy, action and dissipation functionals,
//!   Legendre duality diagnostics, metric slopes and De Giorgi functionals;
//! - [`reconstruction`]: needle reconstruction of a local vector-valued flux
//!   from an edge flux, with the divergence identity check.

pub mod calculus;
pub mod dynamics;
pub mod energetics;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod reconstruction;

pub use error::{Error, Result};
