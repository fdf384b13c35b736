//! Dense and sparse linear algebra used across the pipeline.
//!
//! The Lawson-Hanson nonnegative least-squares solver lives here because every
//! empirical-quadrature construction reduces to it; the rest is plumbing:
//! a symmetric eigensolver for POD Gramians, minimum-norm least squares for
//! Gauss-Newton steps, and a sparse direct solver (reverse Cuthill-McKee
//! reordering plus banded Cholesky/LU) for the high-fidelity systems.

mod dense;
mod nnls;
mod sparse;

pub use dense::{dense_lstsq, sym_eig};
pub use nnls::{nnls, nnls_signed, SparseNonnegVector, SparseSignedVector};
pub use sparse::{rcm_ordering, sparse_solve, BandedCholesky, BandedLu, CsrMatrix, Triplets};
