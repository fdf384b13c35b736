//! Study drivers: the 1D convergence comparison of discretize-then-map
//! against map-then-discretize, the affine-map equivalence check, the full
//! benchmark sweeps with their figure CSV outputs, and the residual-estimator
//! bound check against full-order dual norms.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::config::RunConfig;
use crate::fe::{
    gather, global_assemble, hf_solve_linear, identity_shape_tensors, local_tensors,
    mtd_assemble_1d, shape_tensors, ConstantMetricKernel, InteriorSolver, LaplaceKernel,
    LocalKernel, Source,
};
use crate::geomap::PiecewiseLinearMap1D;
use crate::linalg::nnls;
use crate::mesh::{perturb_interior, rect_mesh, unit_interval_mesh, DeformedElementNodes, Mesh};
use crate::offline::{
    eq_linear_system, eq_nonlinear_states, eq_nonlinear_system, make_extension, run_offline_with,
    sample_params, Discretization, OfflineOutputs,
};
use crate::online::{
    estimator_components, galerkin_online, lspg_solve, OnlineContext, OnlineResult,
};
use crate::problems::Problem;
use crate::quad::gauss_rule;
use crate::{Error, Result};

// ------------------------------------------------------------------
// 1D convergence study
// ------------------------------------------------------------------

/// Errors of the three third-order discretizations at one mesh size.
#[derive(Debug, Clone)]
pub struct Conv1dRow {
    /// Element count.
    pub n_e: usize,
    /// Isoparametric deformed-mesh solve (all nodes mapped).
    pub err_iso: f64,
    /// Subparametric deformed-mesh solve (vertices mapped, interior nodes
    /// placed affinely).
    pub err_sub: f64,
    /// Pulled-back reference-mesh solve.
    pub err_mtd: f64,
}

/// Output of [`convergence_study_1d`]: per-size errors and fitted rates.
#[derive(Debug, Clone)]
pub struct Conv1dReport {
    /// One row per mesh size.
    pub rows: Vec<Conv1dRow>,
    /// Fitted convergence rate of the isoparametric method.
    pub rate_iso: f64,
    /// Fitted convergence rate of the subparametric method.
    pub rate_sub: f64,
    /// Fitted convergence rate of the pulled-back method.
    pub rate_mtd: f64,
}

/// Exact solution of `-u'' = sin(pi x)` on `(0,1)` with zero boundary
/// values.
fn exact_1d(x: f64) -> f64 {
    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * std::f64::consts::PI)
}

/// Deformed element nodes under a 1D map; `affine` replaces the interior
/// nodes by the affine interpolation between the mapped element endpoints.
fn deform_1d(mesh: &Mesh, phi: &PiecewiseLinearMap1D, affine: bool) -> Vec<DeformedElementNodes> {
    (0..mesh.n_elems())
        .map(|k| {
            let xs: Vec<f64> = mesh.elems[k].iter().map(|&j| mesh.nodes[j][0]).collect();
            let a = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let b = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (fa, fb) = (phi.eval(a), phi.eval(b));
            let coords = xs
                .iter()
                .map(|&x| {
                    if affine {
                        [fa + (x - a) / (b - a) * (fb - fa), 0.0]
                    } else {
                        [phi.eval(x), 0.0]
                    }
                })
                .collect();
            DeformedElementNodes { elem: k, coords }
        })
        .collect()
}

/// L2 error of a deformed-mesh solution against the exact physical solution,
/// integrated with a dedicated high-degree rule.
fn l2_error_deformed(
    mesh: &Mesh,
    deformed: &[DeformedElementNodes],
    u: &DVector<f64>,
) -> Result<f64> {
    let quad = gauss_rule(1, 10)?;
    let st = shape_tensors(mesh, deformed, &quad)?;
    let mut err2 = 0.0;
    for (slot, &k) in st.elems.iter().enumerate() {
        let sh = st.elem(slot);
        let u_loc = mesh.element_restriction(k, u, 1);
        for (q, &wq) in sh.w.iter().enumerate() {
            let mut uh = 0.0;
            for i in 0..u_loc.len() {
                uh += sh.l[(q, i)] * u_loc[i];
            }
            let d = uh - exact_1d(sh.phys[q][0]);
            err2 += wq * d * d;
        }
    }
    Ok(err2.sqrt())
}

/// L2 error of a reference-mesh (pulled-back) solution, weighted by the map
/// derivative so the error is measured on the physical domain.
fn l2_error_reference(mesh: &Mesh, phi: &PiecewiseLinearMap1D, u: &DVector<f64>) -> Result<f64> {
    let st = identity_shape_tensors(mesh, 10)?;
    let mut err2 = 0.0;
    for (slot, &k) in st.elems.iter().enumerate() {
        let sh = st.elem(slot);
        let u_loc = mesh.element_restriction(k, u, 1);
        for (q, &wq) in sh.w.iter().enumerate() {
            let x = sh.phys[q][0];
            let mut uh = 0.0;
            for i in 0..u_loc.len() {
                uh += sh.l[(q, i)] * u_loc[i];
            }
            let d = uh - exact_1d(phi.eval(x));
            err2 += wq * phi.deriv(x) * d * d;
        }
    }
    Ok(err2.sqrt())
}

/// Least-squares convergence rate of `errors` against `sizes`, excluding the
/// coarsest size (pre-asymptotic pollution).
fn fit_rate(sizes: &[usize], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = sizes.iter().skip(1).map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().skip(1).map(|&e| e.max(1e-300).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    -cov / var
}

/// Solve `-u'' = sin(pi x)` on the mapped interval with three third-order
/// discretizations per mesh size and report L2 errors and fitted rates.
///
/// The geometry map is continuous piecewise linear with its kink at
/// `1/sqrt(2)`, never on a mesh node: placing high-order nodes through the
/// map (isoparametric) or pulling the operator back (map-then-discretize)
/// both lose accuracy, while mapping only the vertices (subparametric) keeps
/// every element map affine and recovers the optimal fourth-order rate.
pub fn convergence_study_1d(sizes: &[usize]) -> Result<Conv1dReport> {
    if sizes.len() < 3 {
        return Err(Error::Config("convergence_study_1d: need at least 3 sizes".into()));
    }
    let phi = PiecewiseLinearMap1D::study_map();
    let kernel = LaplaceKernel { source: Source::SinPiX1 };
    let mut rows = Vec::with_capacity(sizes.len());
    for &n_e in sizes {
        let mesh = unit_interval_mesh(n_e, 3, 1)?;
        let dir = mesh.extract_dirichlet_indices(&["left", "right"], 1)?;
        let quad = gauss_rule(1, LocalKernel::quad_degree(&kernel, 3))?;
        let zero_datum = DVector::zeros(dir.indices.len());

        let iso = deform_1d(&mesh, &phi, false);
        let st = shape_tensors(&mesh, &iso, &quad)?;
        let u_iso = hf_solve_linear(&mesh, &st, &kernel, &dir, &zero_datum)?;
        let err_iso = l2_error_deformed(&mesh, &iso, &u_iso)?;

        let sub = deform_1d(&mesh, &phi, true);
        let st = shape_tensors(&mesh, &sub, &quad)?;
        let u_sub = hf_solve_linear(&mesh, &st, &kernel, &dir, &zero_datum)?;
        let err_sub = l2_error_deformed(&mesh, &sub, &u_sub)?;

        let (a, f) = mtd_assemble_1d(&mesh, phi, Source::SinPiX1)?;
        let ar = a.restrict(&dir.interior);
        let zsol = crate::linalg::sparse_solve(&ar, &gather(&f, &dir.interior))?;
        let mut u_mtd = DVector::zeros(mesh.n_nodes());
        for (s, &gi) in dir.interior.iter().enumerate() {
            u_mtd[gi] = zsol[s];
        }
        let err_mtd = l2_error_reference(&mesh, &phi, &u_mtd)?;

        rows.push(Conv1dRow { n_e, err_iso, err_sub, err_mtd });
    }
    let err = |f: fn(&Conv1dRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(Conv1dReport {
        rate_iso: fit_rate(sizes, &err(|r| r.err_iso)),
        rate_sub: fit_rate(sizes, &err(|r| r.err_sub)),
        rate_mtd: fit_rate(sizes, &err(|r| r.err_mtd)),
        rows,
    })
}

// ------------------------------------------------------------------
// Equivalence check for affine maps
// ------------------------------------------------------------------

/// Maximum relative entrywise discrepancy between the deformed-mesh Laplace
/// system and the pulled-back constant-metric system under the affine map
/// `x -> G x + c`, on a structured degree-`p` mesh.
///
/// For affine maps the two formulations are algebraically identical, so the
/// discrepancy is pure round-off.
pub fn equivalence_check(p: usize, g_map: [[f64; 2]; 2], c: [f64; 2]) -> Result<f64> {
    // Interior vertices are jittered so the check runs on a genuinely
    // unstructured triangulation.
    let mesh = perturb_interior(&rect_mesh(4, 3, [0.0, 1.0, 0.0, 1.0], p, p)?, 0.15, 9)?;
    let g = Matrix2::new(g_map[0][0], g_map[0][1], g_map[1][0], g_map[1][1]);
    let det = g.determinant();
    if det <= 0.0 {
        return Err(Error::Geometry(format!(
            "equivalence_check: map determinant {det} is not positive"
        )));
    }
    let quad = gauss_rule(2, 2 * p)?;
    let zero = DVector::zeros(mesh.n_nodes());

    // Deformed-mesh assembly: every node through the affine map.
    let deformed: Vec<DeformedElementNodes> = (0..mesh.n_elems())
        .map(|k| DeformedElementNodes {
            elem: k,
            coords: mesh.elems[k]
                .iter()
                .map(|&j| {
                    let x = mesh.nodes[j];
                    [
                        g_map[0][0] * x[0] + g_map[0][1] * x[1] + c[0],
                        g_map[1][0] * x[0] + g_map[1][1] * x[1] + c[1],
                    ]
                })
                .collect(),
        })
        .collect();
    let st = shape_tensors(&mesh, &deformed, &quad)?;
    let kernel = LaplaceKernel { source: Source::Zero };
    let t = local_tensors(&mesh, &st, &kernel, &zero)?;
    let (_, jac_dtm) = global_assemble(&t, &mesh, None)?;

    // Pulled-back assembly on the reference mesh with the constant metric
    // `det(G) G^{-1} G^{-T}`.
    let ginv = g.try_inverse().expect("determinant checked positive");
    let k_mat = ginv * ginv.transpose() * det;
    let kernel =
        ConstantMetricKernel { k: [[k_mat[(0, 0)], k_mat[(0, 1)]], [k_mat[(1, 0)], k_mat[(1, 1)]]] };
    let st = identity_shape_tensors(&mesh, 2 * p)?;
    let t = local_tensors(&mesh, &st, &kernel, &zero)?;
    let (_, jac_mtd) = global_assemble(&t, &mesh, None)?;

    let mut max_gap = 0.0f64;
    let mut max_val = 0.0f64;
    for i in 0..mesh.n_nodes() {
        let (cols, vals) = jac_dtm.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            max_gap = max_gap.max((v - jac_mtd.get(i, j)).abs());
            max_val = max_val.max(v.abs());
        }
    }
    Ok(max_gap / max_val.max(1e-300))
}

// ------------------------------------------------------------------
// Benchmark sweeps
// ------------------------------------------------------------------

/// Metrics of one trained reduced dimension.
#[derive(Debug, Clone)]
pub struct BenchmarkPoint {
    /// Trial dimension.
    pub n: usize,
    /// Average out-of-sample relative error of the empirical-quadrature
    /// model, in the training inner product.
    pub e_avg_eq: f64,
    /// Same average for the full-quadrature reference model.
    pub e_avg_hf: f64,
    /// Sampled elements of the solve quadrature.
    pub q: usize,
    /// Estimator basis dimension.
    pub j_r: usize,
    /// Sampled elements of the estimator quadrature.
    pub q_r: usize,
    /// Datum compression dimension.
    pub m: usize,
}

/// One out-of-sample parameter in the residual-vs-error scatter.
#[derive(Debug, Clone)]
pub struct ScatterPoint {
    /// Test parameter.
    pub mu: Vec<f64>,
    /// True relative error against the HF solve.
    pub error: f64,
    /// Full-order dual residual norm at the reduced solution.
    pub hf_dual: f64,
    /// Hyper-reduced residual estimate.
    pub estimate: f64,
}

/// One empirical-quadrature tolerance in the sparsity sweep.
#[derive(Debug, Clone)]
pub struct TolPoint {
    /// Quadrature tolerance.
    pub tol_eq: f64,
    /// Resulting sampled-element count.
    pub q: usize,
}

/// Output of [`benchmark`].
#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    /// Problem id.
    pub problem: String,
    /// Mesh element count.
    pub n_e: usize,
    /// Per-dimension metrics in the order requested.
    pub points: Vec<BenchmarkPoint>,
    /// Scatter at the largest requested dimension.
    pub scatter: Vec<ScatterPoint>,
    /// Quadrature sparsity against tolerance at the largest dimension.
    pub tol_sweep: Vec<TolPoint>,
    /// Average HF solve wall time in seconds.
    pub hf_solve_seconds: f64,
    /// Average hyper-reduced online solve wall time at the largest
    /// dimension.
    pub rom_solve_seconds: f64,
}

impl BenchmarkReport {
    /// Element-count speedup `N_e / Q` at the largest dimension.
    pub fn speedup_elements(&self) -> f64 {
        let q = self.points.last().map_or(1, |p| p.q.max(1));
        self.n_e as f64 / q as f64
    }

    /// Measured wall-clock speedup of the online solve over the HF solve.
    pub fn speedup_wall(&self) -> f64 {
        self.hf_solve_seconds / self.rom_solve_seconds.max(1e-12)
    }
}

/// Online solve dispatching on the bundle kind.
fn online_solve(ctx: &OnlineContext, mu: &[f64]) -> Result<OnlineResult> {
    if ctx.bundle.y.is_some() {
        lspg_solve(ctx, mu)
    } else {
        galerkin_online(ctx, mu)
    }
}

/// Full-order dual residual norm `||psi||` of the state `u` at `mu`, with
/// `psi` the Riesz representer of the assembled interior residual.
pub fn hf_dual_norm(
    disc: &Discretization,
    ext: &InteriorSolver,
    mu: &[f64],
    u: &DVector<f64>,
) -> Result<f64> {
    let r = full_residual(disc, mu, u)?;
    let r_int = gather(&r, &disc.dir.interior);
    let psi = ext.solve(&r_int);
    Ok(psi.dot(&r_int).max(0.0).sqrt())
}

/// Assembled full-order residual of `u` at `mu` over all elements.
fn full_residual(disc: &Discretization, mu: &[f64], u: &DVector<f64>) -> Result<DVector<f64>> {
    let st = disc.shape_at(mu)?;
    let kernel = disc.problem.kernel(mu);
    let t = local_tensors(&disc.mesh, &st, kernel.as_ref(), u)?;
    let (r, _) = global_assemble(&t, &disc.mesh, None)?;
    Ok(r)
}

/// Train and evaluate reduced models of the configured problem at each
/// trial dimension in `n_values`, sweep the quadrature tolerance at the
/// largest dimension, and collect the residual-vs-error scatter there.
pub fn benchmark(
    config: &RunConfig,
    n_values: &[usize],
    tol_sweep: &[f64],
) -> Result<BenchmarkReport> {
    config.validate()?;
    if n_values.is_empty() {
        return Err(Error::Config("benchmark: no trial dimensions requested".into()));
    }
    let problem = Problem::from_id(&config.problem)?;
    let refinement = config.refinement.unwrap_or_else(|| problem.default_refinement());
    let disc = Discretization::new(problem, refinement)?;
    let param_box = problem.param_box();

    let params = sample_params(&param_box, config.n_train, config.seed);
    let mut snapshots = Vec::with_capacity(params.len());
    for mu in &params {
        snapshots.push((mu.clone(), disc.hf_solve(mu)?));
    }

    let test_params = sample_params(&param_box, config.n_test, config.seed.wrapping_add(3));
    let mut test_hf = Vec::with_capacity(test_params.len());
    let hf_start = Instant::now();
    for mu in &test_params {
        test_hf.push(disc.hf_solve(mu)?);
    }
    let hf_solve_seconds = hf_start.elapsed().as_secs_f64() / test_params.len().max(1) as f64;

    let mut points = Vec::with_capacity(n_values.len());
    let mut scatter = Vec::new();
    let mut rom_solve_seconds = 0.0;
    let mut last: Option<OfflineOutputs> = None;
    for &n in n_values {
        let mut cfg = config.clone();
        cfg.n_modes = Some(n);
        let out = run_offline_with(&cfg, disc.clone(), snapshots.clone())?;
        let ctx_eq = OnlineContext::new(out.bundle.clone())?;
        let ctx_hf = OnlineContext::new(out.bundle.with_unit_quadrature())?;
        let mut sum_eq = 0.0;
        let mut sum_hf = 0.0;
        let mut wall = 0.0;
        let mut point_scatter = Vec::with_capacity(test_params.len());
        let ext = make_extension(&out.disc)?;
        for (mu, u_ref) in test_params.iter().zip(&test_hf) {
            let result = online_solve(&ctx_eq, mu)?;
            wall += result.wall_time;
            let u_eq = ctx_eq.reconstruct(mu, &result.alpha)?;
            let err = out.disc.relative_error(&u_eq, u_ref);
            sum_eq += err;
            let r_hf = online_solve(&ctx_hf, mu)?;
            let u_hf = ctx_hf.reconstruct(mu, &r_hf.alpha)?;
            sum_hf += out.disc.relative_error(&u_hf, u_ref);
            point_scatter.push(ScatterPoint {
                mu: mu.clone(),
                error: err,
                hf_dual: hf_dual_norm(&out.disc, &ext, mu, &u_eq)?,
                estimate: result.estimate,
            });
        }
        let count = test_params.len().max(1) as f64;
        points.push(BenchmarkPoint {
            n: out.bundle.n(),
            e_avg_eq: sum_eq / count,
            e_avg_hf: sum_hf / count,
            q: out.report.q,
            j_r: out.report.j_r,
            q_r: out.report.q_r,
            m: out.report.m,
        });
        scatter = point_scatter;
        rom_solve_seconds = wall / count;
        last = Some(out);
    }

    let out = last.expect("at least one dimension trained");
    let mut sweep = Vec::with_capacity(tol_sweep.len());
    if !tol_sweep.is_empty() {
        let (g, b) = eq_system_for(&out, &params, config)?;
        for &tol in tol_sweep {
            let rho = nnls(&g, &b, tol)?;
            sweep.push(TolPoint { tol_eq: tol, q: rho.nnz() });
        }
    }

    Ok(BenchmarkReport {
        problem: config.problem.clone(),
        n_e: disc.mesh.n_elems(),
        points,
        scatter,
        tol_sweep: sweep,
        hf_solve_seconds,
        rom_solve_seconds,
    })
}

/// The empirical-quadrature constraint system of a trained model, built once
/// so the tolerance sweep only reruns the sparse solver.
fn eq_system_for(
    out: &OfflineOutputs,
    params: &[Vec<f64>],
    config: &RunConfig,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    use crate::bundle::LiftingKind;
    match (&out.bundle.lifting, &out.bundle.y) {
        (LiftingKind::Eim(data), _) => eq_linear_system(&out.disc, params, &out.bundle.z, data),
        (LiftingKind::Reference { e, .. }, Some(y)) => {
            let pairs: Vec<(Vec<f64>, DVector<f64>)> = out
                .snapshots
                .iter()
                .map(|(mu, u)| {
                    (mu.clone(), crate::offline::project_coeffs(&out.disc.ip, &out.bundle.z, u, e))
                })
                .collect();
            let extra = sample_params(
                &out.disc.problem.param_box(),
                config.n_train_eq,
                config.seed.wrapping_add(1),
            );
            let reg = out.bundle.regressor.clone().ok_or_else(|| {
                Error::Config("benchmark: nonlinear bundle lacks a regressor".into())
            })?;
            let states = eq_nonlinear_states(
                &out.disc,
                &pairs,
                &extra,
                &out.bundle.z,
                y,
                e,
                &|mu| reg.predict(mu),
            )?;
            eq_nonlinear_system(&out.disc, &states, &out.bundle.z, y, e)
        }
        _ => Err(Error::Config("benchmark: inconsistent bundle lifting/test space".into())),
    }
}

// ------------------------------------------------------------------
// Residual-estimator bound check
// ------------------------------------------------------------------

/// Estimate-vs-truth decomposition at one test parameter.
#[derive(Debug, Clone)]
pub struct BoundRow {
    /// Test parameter.
    pub mu: Vec<f64>,
    /// True relative error against the HF solve.
    pub error: f64,
    /// Hyper-reduced residual estimate.
    pub estimate: f64,
    /// Full-order dual residual norm at the reduced solution.
    pub hf_dual: f64,
    /// Test-space truncation term `||psi - P psi||^2`.
    pub term_i: f64,
    /// Quadrature term: gap between the sampled and full estimator
    /// component vectors.
    pub term_ii: f64,
}

impl BoundRow {
    /// Left side of the estimate bound.
    pub fn gap(&self) -> f64 {
        (self.estimate - self.hf_dual).abs()
    }

    /// Right side of the estimate bound (the projected-norm denominator is
    /// `hf_dual + ||P psi||`).
    pub fn bound(&self) -> f64 {
        let proj = (self.hf_dual * self.hf_dual - self.term_i).max(0.0).sqrt();
        let denom = self.hf_dual + proj;
        if denom > 0.0 {
            self.term_i / denom + self.term_ii
        } else {
            self.term_ii
        }
    }
}

/// Output of [`bound_check`].
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// One row per test parameter.
    pub rows: Vec<BoundRow>,
    /// Spearman rank correlation between the estimate and the true error.
    pub spearman: f64,
}

/// Rank vector with average ranks on ties.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite metric"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation of two metrics.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va.sqrt() * vb.sqrt()).max(1e-300)
}

/// Evaluate the residual-estimate error bound at each test parameter.
///
/// The gap between the hyper-reduced estimate and the full-order dual
/// residual norm is bounded by a test-space truncation term (I) scaled by the
/// dual norms plus the quadrature-accuracy term (II); both terms are computed
/// against full-order solves.
pub fn bound_check(out: &OfflineOutputs, test_params: &[Vec<f64>]) -> Result<BoundReport> {
    let ctx = OnlineContext::new(out.bundle.clone())?;
    let ext = make_extension(&out.disc)?;
    let eta = &out.bundle.estimator.eta;
    let mut rows = Vec::with_capacity(test_params.len());
    for mu in test_params {
        let u_ref = out.disc.hf_solve(mu)?;
        let result = online_solve(&ctx, mu)?;
        let u = ctx.reconstruct(mu, &result.alpha)?;
        let error = out.disc.relative_error(&u, &u_ref);

        let r = full_residual(&out.disc, mu, &u)?;
        let r_int = gather(&r, &out.disc.dir.interior);
        let psi = ext.solve(&r_int);
        let hf_dual = psi.dot(&r_int).max(0.0).sqrt();

        let (term_i, term_ii) = if out.bundle.estimator.j_r() > 0 {
            // Estimator modes are orthonormal in the training product and
            // vanish on the Dirichlet dofs, so their coefficients against
            // psi are plain dot products with the residual vector.
            let coeffs = eta.transpose() * &r;
            let term_i = (hf_dual * hf_dual - coeffs.norm_squared()).max(0.0);
            let (s, _) = estimator_components(&ctx, mu, &u)?;
            (term_i, (s - coeffs).norm())
        } else {
            (hf_dual * hf_dual, 0.0)
        };
        rows.push(BoundRow { mu: mu.clone(), error, estimate: result.estimate, hf_dual, term_i, term_ii });
    }
    let estimates: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let errors: Vec<f64> = rows.iter().map(|r| r.error).collect();
    Ok(BoundReport { spearman: spearman(&estimates, &errors), rows })
}

// ------------------------------------------------------------------
// CSV output
// ------------------------------------------------------------------

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

/// Write `fig1a.csv`: per-size L2 errors of the three 1D discretizations.
pub fn write_conv1d_csv(report: &Conv1dReport, dir: &Path) -> Result<PathBuf> {
    let mut s = String::from("n_elems,err_iso_p3,err_sub_p1p3,err_mtd_p3\n");
    for r in &report.rows {
        s.push_str(&format!("{},{:.8e},{:.8e},{:.8e}\n", r.n_e, r.err_iso, r.err_sub, r.err_mtd));
    }
    write_file(dir, "fig1a.csv", &s)
}

/// Write the figure CSVs of one benchmark report; the file set depends on
/// the problem (`fig4a/4b/5a/5b/5c` for the airfoil, `fig7a/7b/8` for the
/// viscous bump).
pub fn write_benchmark_csvs(report: &BenchmarkReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let ne = report.n_e as f64;
    let mut err = String::from("n,e_avg_eq,e_avg_hf\n");
    for p in &report.points {
        err.push_str(&format!("{},{:.8e},{:.8e}\n", p.n, p.e_avg_eq, p.e_avg_hf));
    }
    let mut quad = String::from("n,q,q_over_ne\n");
    for p in &report.points {
        quad.push_str(&format!("{},{},{:.8e}\n", p.n, p.q, p.q as f64 / ne));
    }
    let mut est = String::from("n,j_r,q_r\n");
    for p in &report.points {
        est.push_str(&format!("{},{},{}\n", p.n, p.j_r, p.q_r));
    }
    let mut scat = String::from("index,error,hf_dual_residual,estimate\n");
    for (i, p) in report.scatter.iter().enumerate() {
        scat.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e}\n",
            i + 1,
            p.error,
            p.hf_dual,
            p.estimate
        ));
    }
    if report.problem == Problem::Airfoil.id() {
        written.push(write_file(dir, "fig4a.csv", &err)?);
        written.push(write_file(dir, "fig4b.csv", &quad)?);
        let mut sweep = String::from("tol_eq,q,q_over_ne\n");
        for t in &report.tol_sweep {
            sweep.push_str(&format!("{:.2e},{},{:.8e}\n", t.tol_eq, t.q, t.q as f64 / ne));
        }
        written.push(write_file(dir, "fig5a.csv", &sweep)?);
        written.push(write_file(dir, "fig5b.csv", &est)?);
        written.push(write_file(dir, "fig5c.csv", &scat)?);
    } else {
        written.push(write_file(dir, "fig7a.csv", &err)?);
        let mut combined = String::from("n,q,q_over_ne,j_r,q_r\n");
        for p in &report.points {
            combined.push_str(&format!(
                "{},{},{:.8e},{},{}\n",
                p.n,
                p.q,
                p.q as f64 / ne,
                p.j_r,
                p.q_r
            ));
        }
        written.push(write_file(dir, "fig7b.csv", &combined)?);
        written.push(write_file(dir, "fig8.csv", &scat)?);
    }
    Ok(written)
}

/// Write `bound.csv`: the per-parameter estimate-bound decomposition.
pub fn write_bound_csv(report: &BoundReport, dir: &Path) -> Result<PathBuf> {
    let mut s = String::from("index,error,estimate,hf_dual_residual,term_i,term_ii,gap,bound\n");
    for (i, r) in report.rows.iter().enumerate() {
        s.push_str(&format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}\n",
            i + 1,
            r.error,
            r.estimate,
            r.hf_dual,
            r.term_i,
            r.term_ii,
            r.gap(),
            r.bound()
        ));
    }
    write_file(dir, "bound.csv", &s)
}

/// Write the README documenting every CSV the study drivers emit.
pub fn write_study_readme(dir: &Path) -> Result<PathBuf> {
    write_file(
        dir,
        "README.md",
        "# Study outputs\n\
         \n\
         All files are comma-separated with one header line.\n\
         \n\
         - `fig1a.csv` — 1D convergence study. Columns: `n_elems` (element\n\
         \x20 count), `err_iso_p3` / `err_sub_p1p3` / `err_mtd_p3` (L2 errors of\n\
         \x20 the isoparametric deformed-mesh, subparametric deformed-mesh, and\n\
         \x20 pulled-back third-order discretizations).\n\
         - `fig4a.csv` / `fig7a.csv` — average out-of-sample relative error\n\
         \x20 against trial dimension `n`, for the empirical-quadrature model\n\
         \x20 (`e_avg_eq`) and the full-quadrature reference model (`e_avg_hf`);\n\
         \x20 airfoil and viscous-bump benchmarks respectively.\n\
         - `fig4b.csv` — airfoil sampled-element count: `n`, `q`, `q_over_ne`.\n\
         - `fig5a.csv` — airfoil quadrature sparsity against tolerance:\n\
         \x20 `tol_eq`, `q`, `q_over_ne`.\n\
         - `fig5b.csv` — airfoil estimator sizes: `n`, `j_r` (estimator basis\n\
         \x20 dimension), `q_r` (estimator sampled elements).\n\
         - `fig5c.csv` / `fig8.csv` — residual-vs-error scatter at the largest\n\
         \x20 trial dimension: `index` (test parameter number), `error` (true\n\
         \x20 relative error), `hf_dual_residual` (full-order dual residual\n\
         \x20 norm), `estimate` (hyper-reduced estimate).\n\
         - `fig7b.csv` — viscous-bump quadrature and estimator sizes: `n`,\n\
         \x20 `q`, `q_over_ne`, `j_r`, `q_r`.\n\
         - `bound.csv` — estimate-bound decomposition per test parameter:\n\
         \x20 `index`, `error`, `estimate`, `hf_dual_residual`, `term_i`\n\
         \x20 (test-space truncation), `term_ii` (quadrature gap), `gap`\n\
         \x20 (|estimate − dual norm|), `bound` (right side of the inequality).\n",
    )
}
