//! The persisted reduced-model artifact.
//!
//! A bundle is a single binary file with magic `DTMROM1`: a JSON manifest
//! carrying all structure (dimensions, sparse supports, tolerances,
//! provenance) followed by length-prefixed binary sections of little-endian
//! 64-bit floats (the mesh rides along in its own versioned text format).
//! Serialization is deterministic: identical bundles produce identical
//! bytes, which is what makes the double-offline determinism check a plain
//! byte comparison. Indices inside the file are 1-based, matching the mesh
//! text format.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{SparseNonnegVector, SparseSignedVector};
use crate::mesh::Mesh;
use crate::offline::{AlphaRegressor, LiftingData, ResidualEstimatorData};
use crate::problems::Problem;
use crate::{Error, Result};

/// File magic, including a trailing newline so `head -c 8` is readable.
pub const MAGIC: &[u8; 8] = b"DTMROM1\n";

/// Offline tolerances recorded for provenance and reuse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// POD energy tolerance for the trial basis.
    pub tol_pod: f64,
    /// POD energy tolerance for the Dirichlet datum compression.
    pub tol_eim: f64,
    /// Empirical-quadrature residual tolerance.
    pub tol_eq: f64,
    /// Test-space / estimator POD tolerance.
    pub tol_es: f64,
    /// Estimator quadrature residual tolerance.
    pub tol_eq_r: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { tol_pod: 1e-10, tol_eim: 1e-14, tol_eq: 1e-10, tol_es: 1e-4, tol_eq_r: 1e-10 }
    }
}

/// How the Dirichlet datum is lifted into the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum LiftingKind {
    /// Interpolated datum with minimum-energy extension (linear problems).
    Eim(LiftingData),
    /// Parameter-independent lifting by a reference solution (nonlinear
    /// problems; the datum does not move with the geometry).
    Reference {
        /// The reference high-fidelity solution used as lifting.
        e: DVector<f64>,
        /// Parameter the reference was computed at.
        mu_ref: Vec<f64>,
    },
}

/// Everything the online stage reads: problem identity, mesh, bases,
/// quadrature weights, estimator, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RomBundle {
    /// The benchmark problem.
    pub problem: Problem,
    /// Mesh refinement level.
    pub refinement: usize,
    /// Training RNG seed.
    pub seed: u64,
    /// Offline tolerances.
    pub tolerances: Tolerances,
    /// Reference-configuration mesh.
    pub mesh: Mesh,
    /// Inner-product block weights used in training.
    pub ip_weights: Vec<f64>,
    /// Trial basis, `n_dof x N`, zero on the Dirichlet dofs.
    pub z: DMatrix<f64>,
    /// Dirichlet lifting.
    pub lifting: LiftingKind,
    /// Test basis for least-squares solves, `n_dof x J` (nonlinear only).
    pub y: Option<DMatrix<f64>>,
    /// Empirical quadrature weights, supported on `I_eq`.
    pub rho_eq: SparseNonnegVector,
    /// Residual estimator (possibly empty).
    pub estimator: ResidualEstimatorData,
    /// Coefficient regressor for Gauss-Newton warm starts.
    pub regressor: Option<AlphaRegressor>,
    /// Free-form provenance notes.
    pub notes: String,
}

impl RomBundle {
    /// Trial dimension `N`.
    pub fn n(&self) -> usize {
        self.z.ncols()
    }

    /// Sampled-element count `Q`.
    pub fn q(&self) -> usize {
        self.rho_eq.nnz()
    }

    /// Variant with unit quadrature weights on every element and no
    /// estimator: the reference full-quadrature reduced model the empirical
    /// quadrature is measured against.
    pub fn with_unit_quadrature(&self) -> Self {
        let n_e = self.mesh.n_elems();
        Self {
            rho_eq: SparseNonnegVector {
                len: n_e,
                indices: (0..n_e).collect(),
                values: vec![1.0; n_e],
                residual: 0.0,
            },
            estimator: crate::offline::ResidualEstimatorData::empty(self.z.nrows(), n_e),
            ..self.clone()
        }
    }

    /// Serialize to the `DTMROM1` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (lifting_manifest, lifting_sections): (ManifestLifting, Vec<&DMatrix<f64>>) =
            match &self.lifting {
                LiftingKind::Eim(l) => (
                    ManifestLifting {
                        kind: "eim".into(),
                        i_ei: l.i_ei.iter().map(|&i| i + 1).collect(),
                        mu_ref: vec![],
                        m: l.m(),
                    },
                    vec![&l.h, &l.w],
                ),
                LiftingKind::Reference { e: _, mu_ref } => (
                    ManifestLifting {
                        kind: "reference".into(),
                        i_ei: vec![],
                        mu_ref: mu_ref.clone(),
                        m: 1,
                    },
                    vec![],
                ),
            };
        let manifest = Manifest {
            version: 1,
            problem: self.problem.id().into(),
            refinement: self.refinement,
            seed: self.seed,
            tolerances: self.tolerances,
            ip_weights: self.ip_weights.clone(),
            n_dof: self.z.nrows(),
            n: self.z.ncols(),
            j: self.y.as_ref().map_or(0, |y| y.ncols()),
            j_r: self.estimator.j_r(),
            lifting: lifting_manifest,
            rho_eq_indices: self.rho_eq.indices.iter().map(|&i| i + 1).collect(),
            rho_eq_residual: self.rho_eq.residual,
            rho_r_indices: self.estimator.rho.indices.iter().map(|&i| i + 1).collect(),
            rho_r_residual: self.estimator.rho.residual,
            regressor: self.regressor.clone(),
            notes: self.notes.clone(),
        };
        let manifest_bytes =
            serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_section(&mut out, &manifest_bytes);
        put_section(&mut out, self.mesh.write_text().as_bytes());
        put_matrix(&mut out, &self.z);
        match &self.lifting {
            LiftingKind::Eim(_) => {
                for m in lifting_sections {
                    put_matrix(&mut out, m);
                }
            }
            LiftingKind::Reference { e, .. } => {
                put_floats(&mut out, e.as_slice());
            }
        }
        match &self.y {
            Some(y) => put_matrix(&mut out, y),
            None => put_section(&mut out, &[]),
        }
        put_floats(&mut out, &self.rho_eq.values);
        put_matrix(&mut out, &self.estimator.eta);
        put_floats(&mut out, &self.estimator.rho.values);
        out
    }

    /// Parse the `DTMROM1` byte layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bundle: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let manifest_bytes = cur.section()?;
        let manifest: Manifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| Error::Format(format!("bundle: bad manifest: {e}")))?;
        if manifest.version != 1 {
            return Err(Error::Format(format!(
                "bundle: unsupported version {}",
                manifest.version
            )));
        }
        let problem = Problem::from_id(&manifest.problem)?;
        let mesh_text = std::str::from_utf8(cur.section()?)
            .map_err(|e| Error::Format(format!("bundle: mesh section is not UTF-8: {e}")))?;
        let mesh = Mesh::read_text(mesh_text)?;
        let n_dof = mesh.n_nodes() * problem.d_eq();
        if n_dof != manifest.n_dof {
            return Err(Error::Format(format!(
                "bundle: manifest says {} dofs, mesh has {}",
                manifest.n_dof, n_dof
            )));
        }
        let z = cur.matrix(n_dof, manifest.n)?;
        let dir = mesh.extract_dirichlet_indices(&problem.dirichlet_tags(), problem.d_eq())?;
        let lifting = match manifest.lifting.kind.as_str() {
            "eim" => {
                let m = manifest.lifting.m;
                let h = cur.matrix(dir.m_hf(), m)?;
                let w = cur.matrix(n_dof, m)?;
                let mut i_ei = Vec::with_capacity(manifest.lifting.i_ei.len());
                for &i1 in &manifest.lifting.i_ei {
                    if i1 == 0 || i1 > dir.m_hf() {
                        return Err(Error::Format(format!(
                            "bundle: interpolation index {i1} out of 1..={}",
                            dir.m_hf()
                        )));
                    }
                    i_ei.push(i1 - 1);
                }
                LiftingKind::Eim(LiftingData { i_ei, h, w })
            }
            "reference" => {
                let e = DVector::from_vec(cur.floats()?);
                if e.len() != n_dof {
                    return Err(Error::Format(format!(
                        "bundle: reference lifting has {} entries, expected {n_dof}",
                        e.len()
                    )));
                }
                LiftingKind::Reference { e, mu_ref: manifest.lifting.mu_ref.clone() }
            }
            other => return Err(Error::Format(format!("bundle: unknown lifting kind '{other}'"))),
        };
        let y_section = cur.floats()?;
        let y = if manifest.j == 0 {
            if !y_section.is_empty() {
                return Err(Error::Format("bundle: unexpected test-basis section".into()));
            }
            None
        } else {
            Some(matrix_from_vec(y_section, n_dof, manifest.j)?)
        };
        let n_e = mesh.n_elems();
        let rho_eq = SparseNonnegVector {
            len: n_e,
            indices: shift_indices(&manifest.rho_eq_indices, n_e)?,
            values: cur.floats()?,
            residual: manifest.rho_eq_residual,
        };
        if rho_eq.indices.len() != rho_eq.values.len() {
            return Err(Error::Format("bundle: quadrature support/value mismatch".into()));
        }
        let eta = cur.matrix(n_dof, manifest.j_r)?;
        let rho_r = SparseSignedVector {
            len: n_e,
            indices: shift_indices(&manifest.rho_r_indices, n_e)?,
            values: cur.floats()?,
            residual: manifest.rho_r_residual,
        };
        if rho_r.indices.len() != rho_r.values.len() {
            return Err(Error::Format("bundle: estimator support/value mismatch".into()));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "bundle: {} trailing bytes after the last section",
                bytes.len() - cur.pos
            )));
        }
        Ok(RomBundle {
            problem,
            refinement: manifest.refinement,
            seed: manifest.seed,
            tolerances: manifest.tolerances,
            mesh,
            ip_weights: manifest.ip_weights,
            z,
            lifting,
            y,
            rho_eq,
            estimator: ResidualEstimatorData { eta, rho: rho_r },
            regressor: manifest.regressor,
            notes: manifest.notes,
        })
    }

    /// Write to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Read from a file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable provenance summary (the `bundle-info` subcommand).
    pub fn info(&self) -> String {
        let lifting = match &self.lifting {
            LiftingKind::Eim(l) => format!("eim interpolation, M = {}", l.m()),
            LiftingKind::Reference { mu_ref, .. } => {
                format!("reference solution at mu = {mu_ref:?}")
            }
        };
        format!(
            "problem: {}\nrefinement: {} ({} elements, {} dofs)\nseed: {}\n\
             trial dimension N: {}\ntest dimension J: {}\nlifting: {}\n\
             quadrature support Q: {} ({:.2}% of elements)\n\
             estimator: J_r = {}, Q_r = {}\ntolerances: pod {:.1e}, eim {:.1e}, \
             eq {:.1e}, es {:.1e}, eq_r {:.1e}\nnotes: {}",
            self.problem.id(),
            self.refinement,
            self.mesh.n_elems(),
            self.z.nrows(),
            self.seed,
            self.n(),
            self.y.as_ref().map_or(0, |y| y.ncols()),
            lifting,
            self.q(),
            100.0 * self.q() as f64 / self.mesh.n_elems() as f64,
            self.estimator.j_r(),
            self.estimator.rho.nnz(),
            self.tolerances.tol_pod,
            self.tolerances.tol_eim,
            self.tolerances.tol_eq,
            self.tolerances.tol_es,
            self.tolerances.tol_eq_r,
            self.notes,
        )
    }
}

/// JSON manifest at the head of the file.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    problem: String,
    refinement: usize,
    seed: u64,
    tolerances: Tolerances,
    ip_weights: Vec<f64>,
    n_dof: usize,
    n: usize,
    j: usize,
    j_r: usize,
    lifting: ManifestLifting,
    rho_eq_indices: Vec<usize>,
    rho_eq_residual: f64,
    rho_r_indices: Vec<usize>,
    rho_r_residual: f64,
    regressor: Option<AlphaRegressor>,
    notes: String,
}

/// Lifting description inside the manifest (indices 1-based).
#[derive(Debug, Serialize, Deserialize)]
struct ManifestLifting {
    kind: String,
    i_ei: Vec<usize>,
    mu_ref: Vec<f64>,
    m: usize,
}

fn put_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) {
    let mut payload = Vec::with_capacity(values.len() * 8);
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    put_section(out, &payload);
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    put_floats(out, m.as_slice()); // nalgebra storage is column-major
}

fn shift_indices(one_based: &[usize], len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(one_based.len());
    for &i1 in one_based {
        if i1 == 0 || i1 > len {
            return Err(Error::Format(format!("bundle: element index {i1} out of 1..={len}")));
        }
        out.push(i1 - 1);
    }
    Ok(out)
}

fn matrix_from_vec(values: Vec<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if values.len() != rows * cols {
        return Err(Error::Format(format!(
            "bundle: section holds {} floats, expected {rows} x {cols}",
            values.len()
        )));
    }
    Ok(DMatrix::from_vec(rows, cols, values))
}

/// Bounds-checked reader over the byte layout.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "bundle: truncated file (needed {} bytes at offset {}, have {})",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn section(&mut self) -> Result<&'a [u8]> {
        let len_bytes = self.take(8)?;
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        self.take(len)
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let payload = self.section()?;
        if payload.len() % 8 != 0 {
            return Err(Error::Format(format!(
                "bundle: float section length {} is not a multiple of 8",
                payload.len()
            )));
        }
        Ok(payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        matrix_from_vec(self.floats()?, rows, cols)
    }
}
