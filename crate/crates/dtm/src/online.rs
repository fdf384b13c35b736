//! Online evaluation of a trained reduced model: hyper-reduced Galerkin
//! solves for linear problems, hyper-reduced LSPG Gauss-Newton for nonlinear
//! ones, dual-residual estimation, and field reconstruction.
//!
//! The online hot path only ever assembles the sampled elements: every
//! operation reports how many local-assembler calls it made so the
//! `touched <= iterations * (Q + Q_r)` bound can be asserted.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::bundle::{LiftingKind, RomBundle};
use crate::fe::{shape_tensors, LocalKernel, ShapeTensors};
use crate::geomap::{precompute_regions, RegionedMap};
use crate::linalg::dense_lstsq;
use crate::mesh::DirichletIndexSet;
use crate::offline::GaussNewtonOptions;
use crate::problems::{boundary_node_tags, pick_tag};
use crate::quad::{gauss_rule, QuadRule};
use crate::{Error, Result};

/// Result of one online solve.
#[derive(Debug, Clone)]
pub struct OnlineResult {
    /// Reduced coefficients.
    pub alpha: DVector<f64>,
    /// Dual-residual norm estimate (0 when the bundle has no estimator).
    pub estimate: f64,
    /// Assembly passes performed (Gauss-Newton steps plus backtracking
    /// evaluations; 1 for a linear solve).
    pub iterations: usize,
    /// Wall time of the solve in seconds.
    pub wall_time: f64,
    /// Whether the iteration met its convergence criterion.
    pub converged: bool,
    /// Reduced-residual norm per accepted iterate (empty for linear solves).
    pub residual_history: Vec<f64>,
    /// Total local-assembler calls made by the solve.
    pub elements_touched: usize,
}

/// A loaded bundle with the derived structures the online stage needs:
/// geometry map, Dirichlet partition, unassembled bases on the sampled
/// elements. Immutable and shareable across solves.
#[derive(Debug, Clone)]
pub struct OnlineContext {
    /// The persisted artifact.
    pub bundle: RomBundle,
    /// Node-to-region geometry map rebuilt from the mesh.
    pub rmap: RegionedMap,
    /// Dirichlet dof partition.
    pub dir: DirichletIndexSet,
    /// Boundary tags per node.
    pub node_tags: HashMap<usize, Vec<String>>,
    /// Volume quadrature matching the kernel degree.
    pub quad: QuadRule,
    /// Per-element restrictions of the trial basis.
    pub z_un: Vec<DMatrix<f64>>,
    /// Per-element restrictions of the test basis (nonlinear only).
    pub y_un: Vec<DMatrix<f64>>,
    /// Per-element restrictions of the estimator basis.
    pub eta_un: Vec<DMatrix<f64>>,
}

impl OnlineContext {
    /// Derive the online structures from a loaded bundle.
    pub fn new(bundle: RomBundle) -> Result<Self> {
        let problem = bundle.problem;
        let d_eq = problem.d_eq();
        let regions = problem.regions();
        let rmap = if regions.is_empty() {
            RegionedMap::identity(&bundle.mesh)
        } else {
            precompute_regions(&bundle.mesh, regions, problem.mu_bar())?
        };
        let dir = bundle.mesh.extract_dirichlet_indices(&problem.dirichlet_tags(), d_eq)?;
        let node_tags = boundary_node_tags(&bundle.mesh);
        let degree = problem.kernel(&problem.mu_bar()).quad_degree(bundle.mesh.order);
        let quad = gauss_rule(bundle.mesh.dim, degree)?;
        let z_un = bundle.mesh.unassemble(&bundle.z, d_eq);
        let y_un = match &bundle.y {
            Some(y) => bundle.mesh.unassemble(y, d_eq),
            None => vec![],
        };
        let eta_un = if bundle.estimator.j_r() > 0 {
            bundle.mesh.unassemble(&bundle.estimator.eta, d_eq)
        } else {
            vec![]
        };
        Ok(Self { bundle, rmap, dir, node_tags, quad, z_un, y_un, eta_un })
    }

    /// Datum interpolation coefficients `h_mu(I_ei)` (empty for
    /// reference-solution lifting).
    pub fn datum_coeffs(&self, mu: &[f64]) -> Result<DVector<f64>> {
        let LiftingKind::Eim(lifting) = &self.bundle.lifting else {
            return Ok(DVector::zeros(0));
        };
        let problem = self.bundle.problem;
        let dirichlet = problem.dirichlet_tags();
        let n_hf = self.bundle.mesh.n_nodes();
        let mut c = DVector::zeros(lifting.m());
        for (m, &slot) in lifting.i_ei.iter().enumerate() {
            let gi = self.dir.indices[slot];
            let (node, comp) = (gi % n_hf, gi / n_hf);
            let tags = self.node_tags.get(&node).ok_or_else(|| {
                Error::Config(format!("online: node {node} has no boundary tag"))
            })?;
            let tag = pick_tag(tags, &dirichlet).ok_or_else(|| {
                Error::Config(format!("online: node {node} carries no Dirichlet tag"))
            })?;
            let x = self.rmap.map_node(mu, node);
            c[m] = problem.datum(tag, x, mu)?[comp];
        }
        Ok(c)
    }

    /// Lifted field at `mu` (full length; zero off the lifting's support
    /// pattern costs nothing at desk scale).
    pub fn lifted(&self, mu: &[f64]) -> Result<DVector<f64>> {
        match &self.bundle.lifting {
            LiftingKind::Eim(l) => Ok(l.lift(&self.datum_coeffs(mu)?)),
            LiftingKind::Reference { e, .. } => Ok(e.clone()),
        }
    }

    /// Shape tensors over the listed elements at `mu`.
    pub fn shape_subset(&self, mu: &[f64], elems: &[usize]) -> Result<ShapeTensors> {
        let deformed: Vec<_> =
            elems.iter().map(|&k| self.rmap.deformed_element(&self.bundle.mesh, mu, k)).collect();
        shape_tensors(&self.bundle.mesh, &deformed, &self.quad)
    }

    /// Reconstruct the full field `u = lifted + Z alpha`.
    pub fn reconstruct(&self, mu: &[f64], alpha: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.lifted(mu)? + &self.bundle.z * alpha)
    }

    /// Deformed coordinates of every mesh node at `mu` (field export).
    pub fn deformed_nodes(&self, mu: &[f64]) -> Vec<[f64; 2]> {
        let all: Vec<usize> = (0..self.bundle.mesh.n_nodes()).collect();
        self.rmap.map_nodes(mu, &all)
    }
}

/// Hyper-reduced Galerkin solve of a linear problem bundle.
pub fn galerkin_online(ctx: &OnlineContext, mu: &[f64]) -> Result<OnlineResult> {
    if ctx.bundle.y.is_some() {
        return Err(Error::Config(
            "galerkin_online: bundle is nonlinear, use the least-squares solver".into(),
        ));
    }
    let start = Instant::now();
    let problem = ctx.bundle.problem;
    let d_eq = problem.d_eq();
    let n = ctx.bundle.n();
    let kernel = problem.kernel(mu);
    let st = ctx.shape_subset(mu, &ctx.bundle.rho_eq.indices)?;
    let lifted = ctx.lifted(mu)?;
    let mut a_hat = DMatrix::zeros(n, n);
    let mut f_hat = DVector::zeros(n);
    let mut touched = 0usize;
    for (slot, &k) in st.elems.iter().enumerate() {
        let rho = ctx.bundle.rho_eq.values[slot];
        let u_loc = ctx.bundle.mesh.element_restriction(k, &lifted, d_eq);
        let (r, j) = kernel.eval(&st.elem(slot), &u_loc);
        touched += 1;
        let zk = &ctx.z_un[k];
        a_hat += (zk.transpose() * j * zk).scale(rho);
        f_hat -= (zk.transpose() * r).scale(rho);
    }
    let alpha = a_hat.lu().solve(&f_hat).ok_or_else(|| {
        Error::Solver(format!("galerkin_online: singular reduced system at mu {mu:?}"))
    })?;
    let u = ctx.reconstruct(mu, &alpha)?;
    let (estimate, est_touched) = residual_estimate(ctx, mu, &u)?;
    touched += est_touched;
    Ok(OnlineResult {
        alpha,
        estimate,
        iterations: 1,
        wall_time: start.elapsed().as_secs_f64(),
        converged: true,
        residual_history: vec![],
        elements_touched: touched,
    })
}

/// Hyper-reduced test-projected residual and Jacobian at coefficients
/// `alpha`. Only the sampled elements are assembled.
pub fn rom_assemble(
    ctx: &OnlineContext,
    mu: &[f64],
    alpha: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kernel = ctx.bundle.problem.kernel(mu);
    let st = ctx.shape_subset(mu, &ctx.bundle.rho_eq.indices)?;
    let lifted = ctx.lifted(mu)?;
    let u = &lifted + &ctx.bundle.z * alpha;
    let (r, j, _) = assemble_reduced(ctx, kernel.as_ref(), &st, &u, true)?;
    Ok((r, j.expect("jacobian requested")))
}

/// Shared hyper-reduced contraction; `with_jacobian` controls whether the
/// reduced Jacobian is formed. Returns the touch count.
fn assemble_reduced(
    ctx: &OnlineContext,
    kernel: &dyn LocalKernel,
    st: &ShapeTensors,
    u: &DVector<f64>,
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>, usize)> {
    let d_eq = ctx.bundle.problem.d_eq();
    let n = ctx.bundle.n();
    let j_dim = ctx.bundle.y.as_ref().map_or(0, |y| y.ncols());
    if j_dim == 0 {
        return Err(Error::Config("rom_assemble: bundle has no test basis".into()));
    }
    let mut r_hat = DVector::zeros(j_dim);
    let mut j_hat = if with_jacobian { Some(DMatrix::zeros(j_dim, n)) } else { None };
    let mut touched = 0usize;
    for (slot, &k) in st.elems.iter().enumerate() {
        let rho = ctx.bundle.rho_eq.values[slot];
        let u_loc = ctx.bundle.mesh.element_restriction(k, u, d_eq);
        let (r, j) = kernel.eval(&st.elem(slot), &u_loc);
        touched += 1;
        let yk = &ctx.y_un[k];
        r_hat += (yk.transpose() * r).scale(rho);
        if let Some(jh) = j_hat.as_mut() {
            *jh += (yk.transpose() * j * &ctx.z_un[k]).scale(rho);
        }
    }
    Ok((r_hat, j_hat, touched))
}

/// Hyper-reduced LSPG solve via Gauss-Newton, warm-started from the
/// bundle's regressor when present.
///
/// On nonconvergence the last iterate is still returned, flagged
/// `converged = false`, with the residual history attached.
pub fn lspg_solve(ctx: &OnlineContext, mu: &[f64]) -> Result<OnlineResult> {
    lspg_solve_opts(ctx, mu, &GaussNewtonOptions::default())
}

/// [`lspg_solve`] with explicit iteration controls.
pub fn lspg_solve_opts(
    ctx: &OnlineContext,
    mu: &[f64],
    opts: &GaussNewtonOptions,
) -> Result<OnlineResult> {
    let n = ctx.bundle.n();
    let j_dim = ctx.bundle.y.as_ref().map_or(0, |y| y.ncols());
    if j_dim < n {
        return Err(Error::Config(format!(
            "lspg_solve: test dimension {j_dim} is smaller than trial dimension {n}"
        )));
    }
    let start = Instant::now();
    let kernel = ctx.bundle.problem.kernel(mu);
    let st = ctx.shape_subset(mu, &ctx.bundle.rho_eq.indices)?;
    let lifted = ctx.lifted(mu)?;
    let mut alpha = match &ctx.bundle.regressor {
        Some(reg) => reg.predict(mu),
        None => DVector::zeros(n),
    };
    let mut u = &lifted + &ctx.bundle.z * &alpha;
    let (mut r_hat, mut j_hat, mut touched) =
        assemble_reduced(ctx, kernel.as_ref(), &st, &u, true)?;
    let mut iterations = 1usize;
    let r0 = r_hat.norm();
    let target = opts.tol * r0.max(1.0);
    let mut history = vec![r0];
    let mut converged = r_hat.norm() <= target;
    for _ in 0..opts.max_iter {
        if converged {
            break;
        }
        let delta = dense_lstsq(j_hat.as_ref().expect("jacobian present"), &(-&r_hat))?;
        if delta.norm() <= opts.step_tol {
            converged = true;
            break;
        }
        let current = r_hat.norm();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &alpha + delta.scale(step);
            let ut = &lifted + &ctx.bundle.z * &trial;
            let (rt, _, t) = assemble_reduced(ctx, kernel.as_ref(), &st, &ut, false)?;
            touched += t;
            iterations += 1;
            if rt.norm() < current {
                accepted = Some((trial, ut, rt));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ut, rt)) = accepted else {
            break; // stalled line search: report the best iterate, unconverged
        };
        alpha = trial;
        u = ut;
        history.push(rt.norm());
        let (r, j, t) = assemble_reduced(ctx, kernel.as_ref(), &st, &u, true)?;
        touched += t;
        iterations += 1;
        r_hat = r;
        j_hat = j;
        converged = r_hat.norm() <= target;
    }
    let (estimate, est_touched) = residual_estimate(ctx, mu, &u)?;
    touched += est_touched;
    Ok(OnlineResult {
        alpha,
        estimate,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        converged,
        residual_history: history,
        elements_touched: touched,
    })
}

/// Dual-residual norm estimate at the reconstructed field `u`.
///
/// Assembles only the estimator's sampled elements; returns the estimate and
/// the local-assembler call count (0 for an empty estimator).
pub fn residual_estimate(
    ctx: &OnlineContext,
    mu: &[f64],
    u: &DVector<f64>,
) -> Result<(f64, usize)> {
    let (s, touched) = estimator_components(ctx, mu, u)?;
    Ok((s.norm(), touched))
}

/// The estimator's quadrature-weighted component vector
/// `s_n = sum_k rho_k eta_n(k)^T r_k` whose norm is the estimate; the bound
/// study compares it entrywise against its full-quadrature counterpart.
pub fn estimator_components(
    ctx: &OnlineContext,
    mu: &[f64],
    u: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let est = &ctx.bundle.estimator;
    if est.j_r() == 0 {
        return Ok((DVector::zeros(0), 0));
    }
    let d_eq = ctx.bundle.problem.d_eq();
    let kernel = ctx.bundle.problem.kernel(mu);
    let st = ctx.shape_subset(mu, &est.rho.indices)?;
    let mut s = DVector::zeros(est.j_r());
    let mut touched = 0usize;
    for (slot, &k) in st.elems.iter().enumerate() {
        let rho = est.rho.values[slot];
        let u_loc = ctx.bundle.mesh.element_restriction(k, u, d_eq);
        let (r, _) = kernel.eval(&st.elem(slot), &u_loc);
        touched += 1;
        s += (ctx.eta_un[k].transpose() * r).scale(rho);
    }
    Ok((s, touched))
}
