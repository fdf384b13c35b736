//! Offline training stage: snapshot generation, proper orthogonal
//! decomposition, empirical-interpolation Dirichlet lifting, empirical
//! quadrature (linear and nonlinear), empirical test spaces, residual
//! estimator construction, and the coefficient regressor used to warm-start
//! the online Gauss-Newton iteration.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fe::{
    block_weighted_ip, boundary_mass_matrix, gather, global_assemble, h1_matrix, hf_solve_linear,
    hf_solve_newton, identity_shape_tensors, interior_solver, local_tensors, shape_tensors,
    InteriorSolver, NewtonOptions, ShapeTensors,
};
use crate::geomap::{precompute_regions, RegionedMap};
use crate::linalg::{nnls, nnls_signed, sym_eig, CsrMatrix, SparseNonnegVector, SparseSignedVector};
use crate::mesh::{DirichletIndexSet, Mesh};
use crate::problems::{boundary_node_tags, Problem};
use crate::quad::{gauss_rule, QuadRule};
use crate::{Error, Result};

// ------------------------------------------------------------------
// Discretization context
// ------------------------------------------------------------------

/// Everything needed to assemble and solve one problem at arbitrary
/// parameters: mesh, geometry map, Dirichlet partition, inner product, and
/// quadrature. Shared by the offline pipeline and the study drivers.
#[derive(Debug, Clone)]
pub struct Discretization {
    /// The underlying benchmark problem.
    pub problem: Problem,
    /// Mesh refinement level used by `build_mesh`.
    pub refinement: usize,
    /// Reference-configuration mesh.
    pub mesh: Mesh,
    /// Node-to-region geometry map.
    pub rmap: RegionedMap,
    /// Dirichlet dof partition for the problem's constrained tags.
    pub dir: DirichletIndexSet,
    /// Boundary tags per boundary node.
    pub node_tags: HashMap<usize, Vec<String>>,
    /// Block inner product over all dofs (H1 per component).
    pub ip: CsrMatrix,
    /// Per-component weights of `ip`.
    pub ip_weights: Vec<f64>,
    /// Scalar H1 matrix the block product is built from.
    pub scalar_ip: CsrMatrix,
    /// Volume quadrature matching the kernel degree.
    pub quad: QuadRule,
    /// Undeformed element volumes `|D_k|`.
    pub ref_volumes: Vec<f64>,
}

impl Discretization {
    /// Build the full context at refinement level `n`.
    pub fn new(problem: Problem, n: usize) -> Result<Self> {
        let mesh = problem.build_mesh(n)?;
        let regions = problem.regions();
        let rmap = if regions.is_empty() {
            RegionedMap::identity(&mesh)
        } else {
            precompute_regions(&mesh, regions, problem.mu_bar())?
        };
        let d_eq = problem.d_eq();
        let dir = mesh.extract_dirichlet_indices(&problem.dirichlet_tags(), d_eq)?;
        let node_tags = boundary_node_tags(&mesh);
        let scalar_ip = h1_matrix(&mesh)?;
        let ip_weights = vec![1.0; d_eq];
        let ip = block_weighted_ip(&scalar_ip, &ip_weights)?;
        let degree = problem.kernel(&problem.mu_bar()).quad_degree(mesh.order);
        let quad = gauss_rule(mesh.dim, degree)?;
        let ref_volumes = identity_shape_tensors(&mesh, 2 * mesh.order)?.volume;
        Ok(Self {
            problem,
            refinement: n,
            mesh,
            rmap,
            dir,
            node_tags,
            ip,
            ip_weights,
            scalar_ip,
            quad,
            ref_volumes,
        })
    }

    /// Replace the per-component inner-product weights (Gramian
    /// normalization for vector-valued states).
    pub fn set_ip_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        self.ip = block_weighted_ip(&self.scalar_ip, &weights)?;
        self.ip_weights = weights;
        Ok(())
    }

    /// Shape tensors of the deformed configuration at `mu`, all elements.
    pub fn shape_at(&self, mu: &[f64]) -> Result<ShapeTensors> {
        let deformed: Vec<_> = (0..self.mesh.n_elems())
            .map(|k| self.rmap.deformed_element(&self.mesh, mu, k))
            .collect();
        shape_tensors(&self.mesh, &deformed, &self.quad)
    }

    /// Shape tensors at `mu` restricted to the listed elements.
    pub fn shape_subset(&self, mu: &[f64], elems: &[usize]) -> Result<ShapeTensors> {
        let deformed: Vec<_> =
            elems.iter().map(|&k| self.rmap.deformed_element(&self.mesh, mu, k)).collect();
        shape_tensors(&self.mesh, &deformed, &self.quad)
    }

    /// Dirichlet datum aligned with `dir.indices`, evaluated at the mapped
    /// node positions.
    pub fn datum_full(&self, mu: &[f64]) -> Result<DVector<f64>> {
        self.problem.datum_vector(
            &self.mesh,
            &self.dir,
            &self.node_tags,
            &|node| self.rmap.map_node(mu, node),
            mu,
        )
    }

    /// High-fidelity solve at `mu`: a direct interior solve for linear
    /// problems, pseudo-transient Newton for the nonlinear ones.
    pub fn hf_solve(&self, mu: &[f64]) -> Result<DVector<f64>> {
        let st = self.shape_at(mu)?;
        let kernel = self.problem.kernel(mu);
        let h = self.datum_full(mu)?;
        if self.problem == Problem::Burgers {
            let mut u0 = DVector::zeros(self.dir.n_dof);
            for (slot, &gi) in self.dir.indices.iter().enumerate() {
                u0[gi] = h[slot];
            }
            let opts = NewtonOptions { continuation: true, ..NewtonOptions::default() };
            let (u, _) = hf_solve_newton(&self.mesh, &st, kernel.as_ref(), &self.dir, &u0, &opts)?;
            Ok(u)
        } else {
            hf_solve_linear(&self.mesh, &st, kernel.as_ref(), &self.dir, &h)
        }
    }

    /// Relative error of `v` against `reference` in the `ip` norm.
    pub fn relative_error(&self, v: &DVector<f64>, reference: &DVector<f64>) -> f64 {
        let diff = v - reference;
        (ip_dot(&self.ip, &diff, &diff) / ip_dot(&self.ip, reference, reference).max(1e-300))
            .sqrt()
    }
}

/// Inner product `u^T (ip v)`.
pub fn ip_dot(ip: &CsrMatrix, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    u.dot(&ip.matvec(v))
}

/// Norm induced by `ip`.
pub fn ip_norm(ip: &CsrMatrix, v: &DVector<f64>) -> f64 {
    ip_dot(ip, v, v).max(0.0).sqrt()
}

/// Seeded uniform samples from a parameter box.
pub fn sample_params(param_box: &[[f64; 2]], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| param_box.iter().map(|&[lo, hi]| rng.random_range(lo..=hi)).collect())
        .collect()
}

// ------------------------------------------------------------------
// Proper orthogonal decomposition
// ------------------------------------------------------------------

/// POD output: `ip`-orthonormal modes (columns) with the Gramian
/// eigenvalues that selected them.
#[derive(Debug, Clone)]
pub struct Pod {
    /// Modes as columns, orthonormal in the product used for training.
    pub modes: DMatrix<f64>,
    /// All Gramian eigenvalues, sorted descending.
    pub eigs: DVector<f64>,
}

/// Method-of-snapshots POD.
///
/// The retained count is the smallest `N` whose leading eigenvalues hold at
/// least a `1 - tol` fraction of the total energy; eigenvalues below
/// `1e-14 * lambda_1` are never retained (they are rounding noise), so
/// `tol = 0` keeps exactly the numerical rank.
pub fn pod(snapshots: &[DVector<f64>], ip: &CsrMatrix, tol: f64) -> Result<Pod> {
    if snapshots.is_empty() {
        return Err(Error::Config("pod: no snapshots".into()));
    }
    let ns = snapshots.len();
    let products: Vec<DVector<f64>> = snapshots.iter().map(|s| ip.matvec(s)).collect();
    let mut c = DMatrix::zeros(ns, ns);
    for i in 0..ns {
        for j in 0..ns {
            c[(i, j)] = snapshots[i].dot(&products[j]);
        }
    }
    c = (&c + c.transpose()) * 0.5;
    let (eigs, vecs) = sym_eig(&c)?;
    let lambda1 = eigs[0];
    if lambda1 <= 1e-28 {
        return Err(Error::Config("pod: all snapshots are zero".into()));
    }
    let total: f64 = eigs.iter().filter(|&&l| l > 0.0).sum();
    let cutoff = 1e-14 * lambda1;
    let mut n_keep = 0;
    let mut energy = 0.0;
    for n in 0..ns {
        if eigs[n] <= cutoff {
            break;
        }
        n_keep = n + 1;
        energy += eigs[n];
        if energy >= (1.0 - tol) * total {
            break;
        }
    }
    let dof = snapshots[0].len();
    let mut modes = DMatrix::zeros(dof, n_keep);
    for n in 0..n_keep {
        let mut col = DVector::zeros(dof);
        for i in 0..ns {
            col += snapshots[i].scale(vecs[(i, n)]);
        }
        modes.set_column(n, &col.unscale(eigs[n].sqrt()));
    }
    Ok(Pod { modes, eigs })
}

// ------------------------------------------------------------------
// Empirical interpolation
// ------------------------------------------------------------------

/// Greedy empirical-interpolation index selection over the columns of `xi`.
///
/// Returns the magic indices and the interpolation matrix
/// `H = xi * inv(xi[I, :])`: for any column `v` of `xi`,
/// `H * v[I] = v` exactly.
pub fn eim_greedy(xi: &DMatrix<f64>) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let (rows, m) = xi.shape();
    if m == 0 || rows == 0 {
        return Err(Error::Config("eim_greedy: empty basis".into()));
    }
    let scale = xi.amax().max(1e-300);
    let mut indices: Vec<usize> = Vec::with_capacity(m);
    for col in 0..m {
        // Residual of interpolating column `col` on the indices found so far.
        let target = xi.column(col).into_owned();
        let resid = if indices.is_empty() {
            target
        } else {
            let q = indices.len();
            let mut b = DMatrix::zeros(q, q);
            let mut rhs = DVector::zeros(q);
            for (a, &ia) in indices.iter().enumerate() {
                for (bcol, _) in indices.iter().enumerate() {
                    b[(a, bcol)] = xi[(ia, bcol)];
                }
                rhs[a] = target[ia];
            }
            let coeff = b
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Solver("eim_greedy: singular interpolation block".into()))?;
            let mut r = target;
            for (bcol, &cb) in coeff.iter().enumerate() {
                r -= xi.column(bcol).scale(cb);
            }
            r
        };
        let (best, mag) = resid
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.abs()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite residual"))
            .expect("nonempty column");
        if mag <= 1e-14 * scale {
            return Err(Error::Solver(format!(
                "eim_greedy: column {col} is numerically dependent on the previous ones"
            )));
        }
        indices.push(best);
    }
    // H = xi * inv(B) with B = xi[I, :], via B^T Y = xi^T.
    let mut b = DMatrix::zeros(m, m);
    for (a, &ia) in indices.iter().enumerate() {
        for c in 0..m {
            b[(a, c)] = xi[(ia, c)];
        }
    }
    let yt = b
        .transpose()
        .lu()
        .solve(&xi.transpose())
        .ok_or_else(|| Error::Solver("eim_greedy: singular interpolation block".into()))?;
    Ok((indices, yt.transpose()))
}

// ------------------------------------------------------------------
// Dirichlet lifting
// ------------------------------------------------------------------

/// Empirical-interpolation Dirichlet lifting: interpolation indices within
/// the constrained dof list, the boundary interpolation matrix, and its
/// extension into the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftingData {
    /// Interpolation positions within `dir.indices` (Dirichlet slots).
    pub i_ei: Vec<usize>,
    /// Boundary interpolation matrix, `m_hf x M`.
    pub h: DMatrix<f64>,
    /// Lifted basis, `n_dof x M`; its trace on the Dirichlet dofs is `h`.
    pub w: DMatrix<f64>,
}

impl LiftingData {
    /// Expansion size `M`.
    pub fn m(&self) -> usize {
        self.h.ncols()
    }

    /// Interpolation coefficients `h_mu(I_ei)` from a full datum vector.
    pub fn coeffs(&self, h_mu: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.i_ei.len(), |m, _| h_mu[self.i_ei[m]])
    }

    /// Approximate datum on all Dirichlet dofs from the coefficients.
    pub fn interpolate(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.h * coeffs
    }

    /// Lifted field on all dofs from the coefficients.
    pub fn lift(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.w * coeffs
    }
}

/// Scalar boundary mass product restricted to the Dirichlet dofs (the
/// natural product for datum compression; scalar states only).
pub fn dirichlet_ip(mesh: &Mesh, tags: &[&str], dir: &DirichletIndexSet) -> Result<CsrMatrix> {
    let bm = boundary_mass_matrix(mesh, tags)?;
    Ok(bm.restrict(&dir.indices))
}

/// Compress training boundary data with POD in the boundary product, select
/// interpolation indices greedily, and extend the interpolation basis into
/// the domain with the minimum-energy extension.
pub fn build_lifting(
    boundary_data: &[DVector<f64>],
    ip_dir: &CsrMatrix,
    ext: &InteriorSolver,
    tol_eim: f64,
) -> Result<LiftingData> {
    let modes = pod(boundary_data, ip_dir, tol_eim)?.modes;
    let (i_ei, h) = eim_greedy(&modes)?;
    let mut w = DMatrix::zeros(ext.dir.n_dof, h.ncols());
    for m in 0..h.ncols() {
        w.set_column(m, &ext.extend(&h.column(m).into_owned()));
    }
    Ok(LiftingData { i_ei, h, w })
}

// ------------------------------------------------------------------
// Empirical quadrature, linear problems
// ------------------------------------------------------------------

/// Constraint system of [`eq_linear`]: the constant-function row over the
/// reference element volumes plus, per training parameter, the
/// manifold-accuracy block `(A_hf)^-1 [A_k alpha_hf - F_k]`. The all-ones
/// weight vector solves it exactly.
pub fn eq_linear_system(
    disc: &Discretization,
    params: &[Vec<f64>],
    z: &DMatrix<f64>,
    lifting: &LiftingData,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d_eq = disc.problem.d_eq();
    let n = z.ncols();
    let n_e = disc.mesh.n_elems();
    let z_un = disc.mesh.unassemble(z, d_eq);
    let mut g = DMatrix::zeros(1 + params.len() * n, n_e);
    let mut b = DVector::zeros(1 + params.len() * n);
    for k in 0..n_e {
        g[(0, k)] = disc.ref_volumes[k];
        b[0] += disc.ref_volumes[k];
    }
    for (pi, mu) in params.iter().enumerate() {
        let st = disc.shape_at(mu)?;
        let kernel = disc.problem.kernel(mu);
        let lifted = lifting.lift(&lifting.coeffs(&disc.datum_full(mu)?));
        let t = local_tensors(&disc.mesh, &st, kernel.as_ref(), &lifted)?;
        let mut a_hf = DMatrix::zeros(n, n);
        let mut f_hf = DVector::zeros(n);
        let mut a_k = Vec::with_capacity(n_e);
        let mut f_k = Vec::with_capacity(n_e);
        for (slot, &k) in t.elems.iter().enumerate() {
            let zk = &z_un[k];
            let ak = zk.transpose() * &t.jacobians[slot] * zk;
            let fk = -(zk.transpose() * &t.residuals[slot]);
            a_hf += &ak;
            f_hf += &fk;
            a_k.push(ak);
            f_k.push(fk);
        }
        let lu = a_hf.lu();
        let alpha = lu.solve(&f_hf).ok_or_else(|| {
            Error::Solver(format!("eq_linear: singular reduced matrix at mu {mu:?}"))
        })?;
        for (k, (ak, fk)) in a_k.iter().zip(&f_k).enumerate() {
            let row = lu
                .solve(&(ak * &alpha - fk))
                .ok_or_else(|| Error::Solver("eq_linear: singular reduced matrix".into()))?;
            for c in 0..n {
                g[(1 + pi * n + c, k)] = row[c];
            }
        }
    }
    Ok((g, b))
}

/// Empirical quadrature for a linear problem: nonnegative sparse weights
/// solving the [`eq_linear_system`] constraints within `tol_eq`. The support
/// of the returned weights is `I_eq`.
pub fn eq_linear(
    disc: &Discretization,
    params: &[Vec<f64>],
    z: &DMatrix<f64>,
    lifting: &LiftingData,
    tol_eq: f64,
) -> Result<SparseNonnegVector> {
    let (g, b) = eq_linear_system(disc, params, z, lifting)?;
    nnls(&g, &b, tol_eq)
}

// ------------------------------------------------------------------
// Reduced residual helpers and HF-quadrature LSPG (used for training)
// ------------------------------------------------------------------

/// Gauss-Newton controls for the least-squares reduced solves.
#[derive(Debug, Clone, Copy)]
pub struct GaussNewtonOptions {
    /// Relative residual convergence threshold.
    pub tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Backtracking halving cap per step.
    pub max_halvings: usize,
    /// Step-size convergence threshold.
    pub step_tol: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, max_halvings: 20, step_tol: 1e-12 }
    }
}

/// Test-projected residual and Jacobian of the full (HF-quadrature) system
/// at the reduced state `u = e + Z alpha`.
pub fn reduced_system_full(
    mesh: &Mesh,
    st: &ShapeTensors,
    kernel: &dyn crate::fe::LocalKernel,
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = local_tensors(mesh, st, kernel, u)?;
    let (r_full, j_full) = global_assemble(&t, mesh, None)?;
    let r_hat = y.transpose() * &r_full;
    let mut j_hat = DMatrix::zeros(y.ncols(), z.ncols());
    for c in 0..z.ncols() {
        let jz = j_full.matvec(&z.column(c).into_owned());
        j_hat.set_column(c, &(y.transpose() * jz));
    }
    Ok((r_hat, j_hat))
}

/// Test-projected residual only (backtracking evaluations).
fn reduced_residual_full(
    mesh: &Mesh,
    st: &ShapeTensors,
    kernel: &dyn crate::fe::LocalKernel,
    y: &DMatrix<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    let t = local_tensors(mesh, st, kernel, u)?;
    let (r_full, _) = global_assemble(&t, mesh, None)?;
    Ok(y.transpose() * r_full)
}

/// LSPG solve with full (high-fidelity) quadrature: Gauss-Newton on
/// `min_alpha || Y^T R(e + Z alpha) ||_2`.
pub fn lspg_solve_full(
    mesh: &Mesh,
    st: &ShapeTensors,
    kernel: &dyn crate::fe::LocalKernel,
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    e: &DVector<f64>,
    alpha0: &DVector<f64>,
    opts: &GaussNewtonOptions,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let mut alpha = alpha0.clone();
    let mut u = e + z * &alpha;
    let (mut r_hat, mut j_hat) = reduced_system_full(mesh, st, kernel, z, y, &u)?;
    let r0 = r_hat.norm();
    let target = opts.tol * r0.max(1.0);
    let mut history = vec![r0];
    for _ in 0..opts.max_iter {
        if r_hat.norm() <= target {
            return Ok((alpha, history));
        }
        let delta = crate::linalg::dense_lstsq(&j_hat, &(-&r_hat))?;
        if delta.norm() <= opts.step_tol {
            return Ok((alpha, history));
        }
        let mut step = 1.0;
        let current = r_hat.norm();
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &alpha + delta.scale(step);
            let ut = e + z * &trial;
            let rt = reduced_residual_full(mesh, st, kernel, y, &ut)?;
            if rt.norm() < current {
                accepted = Some((trial, ut));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ut)) = accepted else {
            return Err(Error::Solver(format!(
                "lspg_solve_full: no descent after {} halvings (residual {current:.3e})",
                opts.max_halvings
            )));
        };
        alpha = trial;
        u = ut;
        let (r, j) = reduced_system_full(mesh, st, kernel, z, y, &u)?;
        r_hat = r;
        j_hat = j;
        history.push(r_hat.norm());
    }
    if r_hat.norm() <= target {
        Ok((alpha, history))
    } else {
        Err(Error::Solver(format!(
            "lspg_solve_full: not converged after {} iterations (residual {:.3e}, target {:.3e})",
            opts.max_iter,
            r_hat.norm(),
            target
        )))
    }
}

// ------------------------------------------------------------------
// Empirical quadrature, nonlinear problems
// ------------------------------------------------------------------

/// Empirical quadrature for a nonlinear problem.
///
/// Constraint rows are the per-element test-projected residuals at reduced
/// training states: projection coefficients at the training parameters and
/// HF-quadrature LSPG minimizers at the extra parameters (dropped with a
/// warning if that solve fails). The constant-function row is included.
pub fn eq_nonlinear(
    disc: &Discretization,
    train: &[(Vec<f64>, DVector<f64>)],
    extra_params: &[Vec<f64>],
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    e: &DVector<f64>,
    init: &dyn Fn(&[f64]) -> DVector<f64>,
    tol_eq: f64,
) -> Result<SparseNonnegVector> {
    let states = eq_nonlinear_states(disc, train, extra_params, z, y, e, init)?;
    let (g, b) = eq_nonlinear_system(disc, &states, z, y, e)?;
    nnls(&g, &b, tol_eq)
}

/// Reduced training states for [`eq_nonlinear`]: the given training pairs
/// plus HF-quadrature LSPG minimizers at the extra parameters (dropped with
/// a warning when that solve fails).
pub fn eq_nonlinear_states(
    disc: &Discretization,
    train: &[(Vec<f64>, DVector<f64>)],
    extra_params: &[Vec<f64>],
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    e: &DVector<f64>,
    init: &dyn Fn(&[f64]) -> DVector<f64>,
) -> Result<Vec<(Vec<f64>, DVector<f64>)>> {
    let mut states: Vec<(Vec<f64>, DVector<f64>)> = train.to_vec();
    let opts = GaussNewtonOptions::default();
    for mu in extra_params {
        let st = disc.shape_at(mu)?;
        let kernel = disc.problem.kernel(mu);
        match lspg_solve_full(&disc.mesh, &st, kernel.as_ref(), z, y, e, &init(mu), &opts) {
            Ok((alpha, _)) => states.push((mu.clone(), alpha)),
            Err(err) => {
                eprintln!("eq_nonlinear: dropping extra parameter {mu:?}: {err}");
            }
        }
    }
    Ok(states)
}

/// Constraint system of [`eq_nonlinear`] for already-resolved reduced
/// states: the constant-function row plus the per-element test-projected
/// residual rows at each state.
pub fn eq_nonlinear_system(
    disc: &Discretization,
    states: &[(Vec<f64>, DVector<f64>)],
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    e: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d_eq = disc.problem.d_eq();
    let j = y.ncols();
    let n_e = disc.mesh.n_elems();
    let y_un = disc.mesh.unassemble(y, d_eq);
    let mut g = DMatrix::zeros(1 + states.len() * j, n_e);
    let mut b = DVector::zeros(1 + states.len() * j);
    for k in 0..n_e {
        g[(0, k)] = disc.ref_volumes[k];
        b[0] += disc.ref_volumes[k];
    }
    for (si, (mu, alpha)) in states.iter().enumerate() {
        let st = disc.shape_at(mu)?;
        let kernel = disc.problem.kernel(mu);
        let u = e + z * alpha;
        let t = local_tensors(&disc.mesh, &st, kernel.as_ref(), &u)?;
        for (slot, &k) in t.elems.iter().enumerate() {
            let rk = y_un[k].transpose() * &t.residuals[slot];
            for c in 0..j {
                g[(1 + si * j + c, k)] = rk[c];
                b[1 + si * j + c] += rk[c];
            }
        }
    }
    Ok((g, b))
}

// ------------------------------------------------------------------
// Empirical test space
// ------------------------------------------------------------------

/// Riesz representers of Jacobian-times-trial-mode at every snapshot,
/// compressed by POD and truncated to `j_target` columns.
///
/// Representers are zero on the Dirichlet dofs; all interior solves share
/// the factorization held by `ext`.
pub fn empirical_test_space(
    disc: &Discretization,
    snapshots: &[(Vec<f64>, DVector<f64>)],
    z: &DMatrix<f64>,
    ext: &InteriorSolver,
    tol_es: f64,
    j_target: usize,
) -> Result<DMatrix<f64>> {
    let mut reps: Vec<DVector<f64>> = Vec::with_capacity(snapshots.len() * z.ncols());
    for (mu, u) in snapshots {
        let st = disc.shape_at(mu)?;
        let kernel = disc.problem.kernel(mu);
        let t = local_tensors(&disc.mesh, &st, kernel.as_ref(), u)?;
        let (_, j_full) = global_assemble(&t, &disc.mesh, None)?;
        for c in 0..z.ncols() {
            let rhs = j_full.matvec(&z.column(c).into_owned());
            let psi_int = ext.solve(&gather(&rhs, &disc.dir.interior));
            let mut psi = DVector::zeros(disc.dir.n_dof);
            for (s, &gi) in disc.dir.interior.iter().enumerate() {
                psi[gi] = psi_int[s];
            }
            reps.push(psi);
        }
    }
    let modes = pod(&reps, &disc.ip, tol_es)?.modes;
    let j = j_target.min(modes.ncols());
    Ok(modes.columns(0, j).into_owned())
}

// ------------------------------------------------------------------
// Residual estimator training
// ------------------------------------------------------------------

/// Trained dual-residual estimator: orthonormal test modes and signed
/// element weights supported on `I_eq_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEstimatorData {
    /// Riesz test basis, `n_dof x J_r`, ip-orthonormal, zero on the
    /// Dirichlet dofs.
    pub eta: DMatrix<f64>,
    /// Signed element weights.
    pub rho: SparseSignedVector,
}

impl ResidualEstimatorData {
    /// Estimator with no modes (exactly reproduced training residuals).
    pub fn empty(n_dof: usize, n_e: usize) -> Self {
        Self {
            eta: DMatrix::zeros(n_dof, 0),
            rho: SparseSignedVector { len: n_e, indices: vec![], values: vec![], residual: 0.0 },
        }
    }

    /// Retained test dimension `J_r`.
    pub fn j_r(&self) -> usize {
        self.eta.ncols()
    }
}

/// Train the dual-residual estimator against a runnable reduced model.
///
/// `rom_solve` returns the reconstructed reduced field at a parameter; the
/// Riesz representers of its high-fidelity residuals are compressed with
/// `tol_es` and the element weights are fit sign-unconstrained with
/// `tol_eq_r`. If every training residual is numerically zero the estimator
/// is empty and evaluates to exactly zero.
pub fn residual_estimator_offline(
    disc: &Discretization,
    rom_solve: &dyn Fn(&[f64]) -> Result<DVector<f64>>,
    params_r: &[Vec<f64>],
    ext: &InteriorSolver,
    tol_es: f64,
    tol_eq_r: f64,
) -> Result<ResidualEstimatorData> {
    let d_eq = disc.problem.d_eq();
    let n_e = disc.mesh.n_elems();
    let mut reps: Vec<DVector<f64>> = Vec::with_capacity(params_r.len());
    let mut local_residuals: Vec<Vec<DVector<f64>>> = Vec::with_capacity(params_r.len());
    for mu in params_r {
        let u = rom_solve(mu)?;
        let st = disc.shape_at(mu)?;
        let kernel = disc.problem.kernel(mu);
        let t = local_tensors(&disc.mesh, &st, kernel.as_ref(), &u)?;
        let (r_full, _) = global_assemble(&t, &disc.mesh, None)?;
        let psi_int = ext.solve(&gather(&r_full, &disc.dir.interior));
        let mut psi = DVector::zeros(disc.dir.n_dof);
        for (s, &gi) in disc.dir.interior.iter().enumerate() {
            psi[gi] = psi_int[s];
        }
        reps.push(psi);
        local_residuals.push(t.residuals);
    }
    if reps.iter().all(|psi| ip_norm(&disc.ip, psi) <= 1e-12) {
        return Ok(ResidualEstimatorData::empty(disc.dir.n_dof, n_e));
    }
    let eta = pod(&reps, &disc.ip, tol_es)?.modes;
    let j_r = eta.ncols();
    let eta_un = disc.mesh.unassemble(&eta, d_eq);
    let mut g = DMatrix::zeros(params_r.len() * j_r, n_e);
    let mut b = DVector::zeros(params_r.len() * j_r);
    for (pi, residuals) in local_residuals.iter().enumerate() {
        for (k, rk) in residuals.iter().enumerate() {
            let proj = eta_un[k].transpose() * rk;
            for c in 0..j_r {
                g[(pi * j_r + c, k)] = proj[c];
                b[pi * j_r + c] += proj[c];
            }
        }
    }
    let rho = nnls_signed(&g, &b, tol_eq_r)?;
    Ok(ResidualEstimatorData { eta, rho })
}

// ------------------------------------------------------------------
// Coefficient regressor
// ------------------------------------------------------------------

/// Interpolating regressor mapping a parameter to reduced coefficients,
/// used to warm-start the online Gauss-Newton iteration.
///
/// One-parameter problems use piecewise-linear interpolation with constant
/// extrapolation; multi-parameter problems use inverse-distance weighting
/// over the nearest training parameters in the unit-scaled box. Exact at
/// every training parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRegressor {
    /// Training parameters.
    pub params: Vec<Vec<f64>>,
    /// Training coefficients, one row per parameter.
    pub alphas: Vec<Vec<f64>>,
    /// Parameter box used for unit scaling.
    pub param_box: Vec<[f64; 2]>,
}

/// Fit the regressor from training pairs.
pub fn train_alpha_regressor(
    pairs: &[(Vec<f64>, DVector<f64>)],
    param_box: &[[f64; 2]],
) -> Result<AlphaRegressor> {
    if pairs.len() < 2 {
        return Err(Error::Config(format!(
            "train_alpha_regressor: {} training pairs, need at least 2",
            pairs.len()
        )));
    }
    Ok(AlphaRegressor {
        params: pairs.iter().map(|(mu, _)| mu.clone()).collect(),
        alphas: pairs.iter().map(|(_, a)| a.iter().copied().collect()).collect(),
        param_box: param_box.to_vec(),
    })
}

impl AlphaRegressor {
    /// Predicted coefficients at `mu`.
    pub fn predict(&self, mu: &[f64]) -> DVector<f64> {
        let n_out = self.alphas[0].len();
        if self.param_box.len() == 1 {
            return self.predict_1d(mu[0]);
        }
        // Inverse-distance weighting over the k nearest unit-scaled points.
        let scale = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(&self.param_box)
                .map(|(&x, &[lo, hi])| (x - lo) / (hi - lo).max(1e-300))
                .collect()
        };
        let q = scale(mu);
        let mut dists: Vec<(f64, usize)> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let s = scale(p);
                let d2: f64 = s.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        if dists[0].0 < 1e-10 {
            return DVector::from_vec(self.alphas[dists[0].1].clone());
        }
        let k = 5.min(dists.len());
        let mut acc = DVector::zeros(n_out);
        let mut wsum = 0.0;
        for &(d, i) in dists.iter().take(k) {
            let w = 1.0 / (d * d);
            acc += DVector::from_vec(self.alphas[i].clone()).scale(w);
            wsum += w;
        }
        acc.unscale(wsum)
    }

    /// Piecewise-linear interpolation with constant extrapolation.
    fn predict_1d(&self, x: f64) -> DVector<f64> {
        let mut order: Vec<usize> = (0..self.params.len()).collect();
        order.sort_by(|&a, &b| {
            self.params[a][0].partial_cmp(&self.params[b][0]).expect("finite parameters")
        });
        let xs: Vec<f64> = order.iter().map(|&i| self.params[i][0]).collect();
        let first = order[0];
        let last = *order.last().expect("nonempty");
        if x <= xs[0] {
            return DVector::from_vec(self.alphas[first].clone());
        }
        if x >= *xs.last().expect("nonempty") {
            return DVector::from_vec(self.alphas[last].clone());
        }
        let hi = xs.partition_point(|&v| v < x).max(1);
        let (x0, x1) = (xs[hi - 1], xs[hi]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        let a0 = DVector::from_vec(self.alphas[order[hi - 1]].clone());
        let a1 = DVector::from_vec(self.alphas[order[hi]].clone());
        a0.scale(1.0 - t) + a1.scale(t)
    }
}

// ------------------------------------------------------------------
// Shared offline utilities
// ------------------------------------------------------------------

/// Projection coefficients of a lifted snapshot onto an ip-orthonormal
/// basis: `alpha = Z^T (ip (u - e))`.
pub fn project_coeffs(
    ip: &CsrMatrix,
    z: &DMatrix<f64>,
    u: &DVector<f64>,
    e: &DVector<f64>,
) -> DVector<f64> {
    z.transpose() * ip.matvec(&(u - e))
}

/// Interior solver over the discretization's inner product (shared
/// factorization for extensions and Riesz representers).
pub fn make_extension(disc: &Discretization) -> Result<InteriorSolver> {
    interior_solver(&disc.ip, &disc.dir)
}

// ------------------------------------------------------------------
// Offline pipeline
// ------------------------------------------------------------------

/// Per-run training summary written beside the bundle.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// Training parameters.
    pub params: Vec<Vec<f64>>,
    /// Interior residual norm of each converged snapshot.
    pub snapshot_residuals: Vec<f64>,
    /// POD eigenvalues of the lifted snapshot set.
    pub pod_eigs: Vec<f64>,
    /// Datum expansion size `M` (1 for reference-solution lifting).
    pub m: usize,
    /// Trial dimension `N`.
    pub n: usize,
    /// Quadrature support `Q`.
    pub q: usize,
    /// Estimator test dimension `J_r`.
    pub j_r: usize,
    /// Estimator quadrature support `Q_r`.
    pub q_r: usize,
}

impl TrainingReport {
    /// Render the report as CSV with a summary comment line.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "# M={} N={} Q={} J_r={} Q_r={}", self.m, self.n, self.q, self.j_r, self.q_r)
            .unwrap();
        let p = self.params.first().map_or(0, |mu| mu.len());
        let mu_cols: Vec<String> = (1..=p).map(|i| format!("mu_{i}")).collect();
        writeln!(s, "index,{},snapshot_residual,pod_eigenvalue", mu_cols.join(",")).unwrap();
        for (i, mu) in self.params.iter().enumerate() {
            let mu_vals: Vec<String> = mu.iter().map(|v| format!("{v:.16e}")).collect();
            let eig = self.pod_eigs.get(i).copied().unwrap_or(0.0);
            writeln!(
                s,
                "{},{},{:.16e},{:.16e}",
                i + 1,
                mu_vals.join(","),
                self.snapshot_residuals[i],
                eig
            )
            .unwrap();
        }
        s
    }
}

/// Everything produced by one offline run.
#[derive(Debug, Clone)]
pub struct OfflineOutputs {
    /// The persisted artifact.
    pub bundle: crate::bundle::RomBundle,
    /// Training summary.
    pub report: TrainingReport,
    /// The discretization used (reusable by study drivers).
    pub disc: Discretization,
    /// Training parameters and snapshots.
    pub snapshots: Vec<(Vec<f64>, DVector<f64>)>,
}

/// Interior residual norm of a state at a parameter (snapshot quality
/// reporting).
pub fn interior_residual_norm(
    disc: &Discretization,
    mu: &[f64],
    u: &DVector<f64>,
) -> Result<f64> {
    let st = disc.shape_at(mu)?;
    let kernel = disc.problem.kernel(mu);
    let t = local_tensors(&disc.mesh, &st, kernel.as_ref(), u)?;
    let (r, _) = global_assemble(&t, &disc.mesh, None)?;
    Ok(gather(&r, &disc.dir.interior).norm())
}

/// Run the whole training pipeline for one configuration.
///
/// Deterministic: the same configuration and seed produce byte-identical
/// bundles. The nonlinear path lifts with the reference-parameter snapshot
/// and warm-starts its least-squares solves with the interpolating
/// regressor, which is recorded as a stand-in in the bundle notes.
pub fn run_offline(config: &crate::config::RunConfig) -> Result<OfflineOutputs> {
    config.validate()?;
    let problem = Problem::from_id(&config.problem)?;
    if problem == Problem::Study1D {
        return Err(Error::Config(
            "offline: study-1d is a convergence study, not a reduced model".into(),
        ));
    }
    let refinement = config.refinement.unwrap_or_else(|| problem.default_refinement());
    let disc = Discretization::new(problem, refinement)?;

    // Stage 1: snapshots.
    let params = sample_params(&problem.param_box(), config.n_train, config.seed);
    let mut snapshots: Vec<(Vec<f64>, DVector<f64>)> = Vec::with_capacity(params.len());
    for mu in &params {
        let u = disc.hf_solve(mu)?;
        snapshots.push((mu.clone(), u));
    }
    run_offline_with(config, disc, snapshots)
}

/// The training pipeline after snapshot generation: study drivers call this
/// directly to reuse one discretization and snapshot set across many
/// reduced dimensions.
pub fn run_offline_with(
    config: &crate::config::RunConfig,
    mut disc: Discretization,
    snapshots: Vec<(Vec<f64>, DVector<f64>)>,
) -> Result<OfflineOutputs> {
    use crate::bundle::{LiftingKind, RomBundle, Tolerances};
    use crate::online::{galerkin_online, lspg_solve, OnlineContext};

    config.validate()?;
    let problem = disc.problem;
    let refinement = disc.refinement;
    let d_eq = problem.d_eq();
    let param_box = problem.param_box();
    let params: Vec<Vec<f64>> = snapshots.iter().map(|(mu, _)| mu.clone()).collect();
    let mut snapshot_residuals = Vec::with_capacity(snapshots.len());
    for (mu, u) in &snapshots {
        snapshot_residuals.push(interior_residual_norm(&disc, mu, u)?);
    }

    // Stage 2: inner-product normalization for vector states.
    if d_eq > 1 {
        let fields: Vec<DVector<f64>> = snapshots.iter().map(|(_, u)| u.clone()).collect();
        let eigs = crate::fe::block_gramian_eigs(&disc.scalar_ip, &fields, d_eq)?;
        // Components absent from every snapshot keep unit weight.
        disc.set_ip_weights(eigs.iter().map(|&l| if l > 0.0 { 1.0 / l } else { 1.0 }).collect())?;
    }
    let ext = make_extension(&disc)?;

    // Stage 3: Dirichlet lifting.
    let (lifting, lift_field): (LiftingKind, Box<dyn Fn(&[f64]) -> Result<DVector<f64>>>) =
        if problem == Problem::Burgers {
            let e = disc.hf_solve(&problem.mu_bar())?;
            let e_clone = e.clone();
            (
                LiftingKind::Reference { e, mu_ref: problem.mu_bar() },
                Box::new(move |_mu: &[f64]| Ok(e_clone.clone())),
            )
        } else {
            let boundary: Vec<DVector<f64>> =
                params.iter().map(|mu| disc.datum_full(mu)).collect::<Result<_>>()?;
            let ip_dir = dirichlet_ip(&disc.mesh, &problem.dirichlet_tags(), &disc.dir)?;
            let data = build_lifting(&boundary, &ip_dir, &ext, config.tol_eim)?;
            let data_clone = data.clone();
            let disc_datum = disc.clone();
            (
                LiftingKind::Eim(data),
                Box::new(move |mu: &[f64]| {
                    let h = disc_datum.datum_full(mu)?;
                    Ok(data_clone.lift(&data_clone.coeffs(&h)))
                }),
            )
        };

    // Stage 4: trial basis from lifted snapshots (Dirichlet rows zeroed so
    // the basis vanishes there exactly).
    let mut lifted_snaps = Vec::with_capacity(snapshots.len());
    for (mu, u) in &snapshots {
        let mut v = u - lift_field(mu)?;
        for &gi in &disc.dir.indices {
            v[gi] = 0.0;
        }
        lifted_snaps.push(v);
    }
    let pod_out = pod(&lifted_snaps, &disc.ip, config.tol_pod)?;
    let n_keep = config.n_modes.map_or(pod_out.modes.ncols(), |n| n.min(pod_out.modes.ncols()));
    let z = pod_out.modes.columns(0, n_keep).into_owned();

    // Stage 5: empirical quadrature, test space, regressor.
    let (y, rho_eq, regressor, notes) = if problem == Problem::Burgers {
        let LiftingKind::Reference { e, .. } = &lifting else { unreachable!() };
        let pairs: Vec<(Vec<f64>, DVector<f64>)> = snapshots
            .iter()
            .map(|(mu, u)| (mu.clone(), project_coeffs(&disc.ip, &z, u, e)))
            .collect();
        let regressor = train_alpha_regressor(&pairs, &param_box)?;
        let j_target = config.j_test.unwrap_or(2 * z.ncols());
        let y = empirical_test_space(&disc, &snapshots, &z, &ext, config.tol_es, j_target)?;
        let extra = sample_params(&param_box, config.n_train_eq, config.seed.wrapping_add(1));
        let reg_init = regressor.clone();
        let rho_eq = eq_nonlinear(
            &disc,
            &pairs,
            &extra,
            &z,
            &y,
            e,
            &|mu| reg_init.predict(mu),
            config.tol_eq,
        )?;
        (
            Some(y),
            rho_eq,
            Some(regressor),
            "coefficient regressor: interpolation stand-in (piecewise linear / \
             inverse-distance weighting)"
                .to_string(),
        )
    } else {
        let LiftingKind::Eim(data) = &lifting else { unreachable!() };
        let rho_eq = eq_linear(&disc, &params, &z, data, config.tol_eq)?;
        (None, rho_eq, None, String::new())
    };

    // Stage 6: residual estimator, trained against the hyper-reduced model.
    let provisional = RomBundle {
        problem,
        refinement,
        seed: config.seed,
        tolerances: Tolerances {
            tol_pod: config.tol_pod,
            tol_eim: config.tol_eim,
            tol_eq: config.tol_eq,
            tol_es: config.tol_es,
            tol_eq_r: config.tol_eq_r,
        },
        mesh: disc.mesh.clone(),
        ip_weights: disc.ip_weights.clone(),
        z: z.clone(),
        lifting: lifting.clone(),
        y: y.clone(),
        rho_eq: rho_eq.clone(),
        estimator: ResidualEstimatorData::empty(disc.dir.n_dof, disc.mesh.n_elems()),
        regressor: regressor.clone(),
        notes: notes.clone(),
    };
    let ctx = OnlineContext::new(provisional.clone())?;
    let rom_solve = |mu: &[f64]| -> Result<DVector<f64>> {
        let result = if problem == Problem::Burgers {
            lspg_solve(&ctx, mu)?
        } else {
            galerkin_online(&ctx, mu)?
        };
        ctx.reconstruct(mu, &result.alpha)
    };
    let params_r = sample_params(&param_box, config.n_train_r, config.seed.wrapping_add(2));
    let estimator = residual_estimator_offline(
        &disc,
        &rom_solve,
        &params_r,
        &ext,
        config.tol_es,
        config.tol_eq_r,
    )?;

    let report = TrainingReport {
        params: params.clone(),
        snapshot_residuals,
        pod_eigs: pod_out.eigs.iter().copied().collect(),
        m: match &lifting {
            LiftingKind::Eim(data) => data.m(),
            LiftingKind::Reference { .. } => 1,
        },
        n: z.ncols(),
        q: rho_eq.nnz(),
        j_r: estimator.j_r(),
        q_r: estimator.rho.nnz(),
    };
    let bundle = RomBundle { estimator, ..provisional };
    Ok(OfflineOutputs { bundle, report, disc, snapshots })
}
