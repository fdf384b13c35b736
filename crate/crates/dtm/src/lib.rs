//! Discretize-then-map (DtM) parametric model order reduction.
//!
//! The library builds reduced-order models for PDEs posed on parameterized
//! geometries. Instead of pulling the equations back to a reference domain
//! (map-then-discretize), the mesh nodes of the sampled elements are deformed
//! online and the unmodified physical-space local assemblers are reused.
//!
//! Pipeline, bottom up:
//! - [`mesh`]: reference simplices, Lagrange bases, meshes, connectivity.
//! - [`geomap`]: Gordon-Hall patch maps, region labeling, O(1) node mapping.
//! - [`quad`] / [`fe`]: quadrature, shape tensors, local assemblers, global
//!   assembly, inner products, lifting, high-fidelity solvers.
//! - [`linalg`]: dense eigen/least-squares helpers, sparse direct solves, and
//!   the Lawson-Hanson nonnegative least-squares solver behind all empirical
//!   quadrature constructions.
//! - [`offline`]: POD, EIM lifting, empirical quadrature, empirical test
//!   spaces, residual-estimator training.
//! - [`online`] / [`bundle`]: hyper-reduced Galerkin and LSPG solves, residual
//!   estimation, the persisted `DTMROM1` artifact.
//! - [`problems`] / [`studies`]: the concrete benchmarks and the drivers that
//!   emit their CSV reports.

pub mod bundle;
pub mod config;
pub mod error;
pub mod fe;
pub mod geomap;
pub mod linalg;
pub mod mesh;
pub mod offline;
pub mod online;
pub mod problems;
pub mod quad;
pub mod studies;

pub use error::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
