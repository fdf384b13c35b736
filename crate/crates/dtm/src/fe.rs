//! Finite-element kernel: shape tensors, local assemblers, global assembly,
//! inner products, boundary norms, extension/lifting, and the high-fidelity
//! linear and Newton solvers.
//!
//! Everything is organized around the deform-then-assemble workflow: a
//! geometry map moves the mesh nodes, [`shape_tensors`] turns the deformed
//! configuration into per-element physical gradients and quadrature weights,
//! a [`LocalKernel`] produces element residual/Jacobian blocks from them, and
//! [`global_assemble`] accumulates the blocks — optionally scaled by sparse
//! element weights, which is the hook the empirical-quadrature reduced models
//! rely on.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{sparse_solve, sym_eig, BandedCholesky, CsrMatrix, Triplets};
use crate::mesh::{DeformedElementNodes, DirichletIndexSet, Mesh};
use crate::quad::{gauss_rule, QuadRule};
use crate::{Error, Result};

// ------------------------------------------------------------------
// Shape tensors
// ------------------------------------------------------------------

/// Per-element quadrature data of a (possibly deformed) mesh configuration.
///
/// `l` is map-independent; gradients and weights are per element and
/// quadrature point. Elements may be a subset of the mesh (reduced models
/// only touch sampled elements); `slot_of` translates element ids to
/// positions in the per-element arrays.
#[derive(Debug, Clone)]
pub struct ShapeTensors {
    /// Spatial dimension.
    pub dim: usize,
    /// Local basis size.
    pub n_lp: usize,
    /// Basis values, n_q x n_lp.
    pub l: DMatrix<f64>,
    /// Listed element ids, in input order.
    pub elems: Vec<usize>,
    /// Physical basis gradients per listed element and point (n_lp x D).
    pub grads: Vec<Vec<DMatrix<f64>>>,
    /// Physical quadrature weights per listed element and point.
    pub w: Vec<Vec<f64>>,
    /// Physical quadrature point locations.
    pub phys: Vec<Vec<[f64; 2]>>,
    /// Physical basis Laplacians, present only for straight-sided
    /// (geom_order = 1) meshes where second derivatives are affine pullbacks.
    pub lap: Option<Vec<Vec<DVector<f64>>>>,
    /// Element volumes (sum of physical weights).
    pub volume: Vec<f64>,
    /// Element size h_k = volume^(1/D).
    pub h: Vec<f64>,
    slot_of: std::collections::HashMap<usize, usize>,
}

/// Borrowed view of one element's shape data.
#[derive(Debug, Clone, Copy)]
pub struct ElementShape<'a> {
    /// Basis values, n_q x n_lp (shared).
    pub l: &'a DMatrix<f64>,
    /// Physical gradients per point.
    pub grads: &'a [DMatrix<f64>],
    /// Physical weights.
    pub w: &'a [f64],
    /// Physical point locations.
    pub phys: &'a [[f64; 2]],
    /// Physical basis Laplacians per point, when available.
    pub lap: Option<&'a [DVector<f64>]>,
    /// Element size.
    pub h: f64,
}

impl ShapeTensors {
    /// Position of element `k` in the per-element arrays.
    pub fn slot(&self, k: usize) -> Option<usize> {
        self.slot_of.get(&k).copied()
    }

    /// Element view at a given slot.
    pub fn elem(&self, slot: usize) -> ElementShape<'_> {
        ElementShape {
            l: &self.l,
            grads: &self.grads[slot],
            w: &self.w[slot],
            phys: &self.phys[slot],
            lap: self.lap.as_ref().map(|l| l[slot].as_slice()),
            h: self.h[slot],
        }
    }
}

/// Precompute physical gradients, weights, and point locations for the given
/// deformed element configurations.
pub fn shape_tensors(
    mesh: &Mesh,
    deformed: &[DeformedElementNodes],
    quad: &QuadRule,
) -> Result<ShapeTensors> {
    if quad.dim != mesh.dim {
        return Err(Error::Config(format!(
            "shape_tensors: quadrature dimension {} does not match mesh dimension {}",
            quad.dim, mesh.dim
        )));
    }
    let n_lp = mesh.ref_elem.n_lp;
    let n_q = quad.len();
    let mut l = DMatrix::zeros(n_q, n_lp);
    for (q, x) in quad.points.iter().enumerate() {
        l.row_mut(q).tr_copy_from(&mesh.ref_elem.eval(*x));
    }
    let straight = mesh.geom_order == 1;
    let mut elems = Vec::with_capacity(deformed.len());
    let mut grads = Vec::with_capacity(deformed.len());
    let mut w = Vec::with_capacity(deformed.len());
    let mut phys = Vec::with_capacity(deformed.len());
    let mut lap = if straight { Some(Vec::with_capacity(deformed.len())) } else { None };
    let mut volume = Vec::with_capacity(deformed.len());
    let mut h = Vec::with_capacity(deformed.len());
    let mut slot_of = std::collections::HashMap::new();
    for d in deformed {
        let k = d.elem;
        let mut eg = Vec::with_capacity(n_q);
        let mut ew = Vec::with_capacity(n_q);
        let mut ep = Vec::with_capacity(n_q);
        let mut el = Vec::with_capacity(n_q);
        let mut vol = 0.0;
        for (q, x) in quad.points.iter().enumerate() {
            let (g, det) = mesh.deformed_map_grad(d, *x);
            if det <= 1e-14 {
                return Err(Error::Assembly(format!(
                    "shape_tensors: nonpositive map determinant {det:.3e} in element {k}, point {q}"
                )));
            }
            // Inverse of the 1x1 / 2x2 map Jacobian.
            let ginv = match mesh.dim {
                1 => DMatrix::from_element(1, 1, 1.0 / g[(0, 0)]),
                _ => DMatrix::from_row_slice(
                    2,
                    2,
                    &[g[(1, 1)] / det, -g[(0, 1)] / det, -g[(1, 0)] / det, g[(0, 0)] / det],
                ),
            };
            let ref_grads = mesh.ref_elem.grad(*x);
            eg.push(&ref_grads * &ginv);
            ew.push(quad.weights[q] * det);
            ep.push(mesh.deformed_map(d, *x));
            if straight {
                // Affine map: physical Hessian is Ginv^T H Ginv; take traces.
                let hess = mesh.ref_elem.hess(*x);
                let mut lp = DVector::zeros(n_lp);
                for i in 0..n_lp {
                    if mesh.dim == 1 {
                        lp[i] = hess[(i, 0)] * ginv[(0, 0)] * ginv[(0, 0)];
                    } else {
                        let hm = [
                            [hess[(i, 0)], hess[(i, 1)]],
                            [hess[(i, 1)], hess[(i, 2)]],
                        ];
                        let mut tr = 0.0;
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    tr += ginv[(b, a)] * hm[b][c] * ginv[(c, a)];
                                }
                            }
                        }
                        lp[i] = tr;
                    }
                }
                el.push(lp);
            }
            vol += quad.weights[q] * det;
        }
        slot_of.insert(k, elems.len());
        elems.push(k);
        grads.push(eg);
        w.push(ew);
        phys.push(ep);
        if let Some(lv) = lap.as_mut() {
            lv.push(el);
        }
        volume.push(vol);
        h.push(vol.powf(1.0 / mesh.dim as f64));
    }
    Ok(ShapeTensors { dim: mesh.dim, n_lp, l, elems, grads, w, phys, lap, volume, h, slot_of })
}

/// Shape tensors of the undeformed mesh over all elements.
pub fn identity_shape_tensors(mesh: &Mesh, degree: usize) -> Result<ShapeTensors> {
    let quad = gauss_rule(mesh.dim, degree)?;
    let deformed: Vec<_> = (0..mesh.n_elems()).map(|k| mesh.identity_deformed(k)).collect();
    shape_tensors(mesh, &deformed, &quad)
}

// ------------------------------------------------------------------
// Local kernels
// ------------------------------------------------------------------

/// Volumetric source term of a scalar equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    /// No source.
    Zero,
    /// `sin(pi * x_1)`.
    SinPiX1,
    /// Constant value.
    Constant(f64),
}

impl Source {
    /// Evaluate at a physical point.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match self {
            Source::Zero => 0.0,
            Source::SinPiX1 => (std::f64::consts::PI * x[0]).sin(),
            Source::Constant(c) => *c,
        }
    }
}

/// Element residual/Jacobian assembler.
///
/// `eval` returns the local residual and its exact Jacobian with respect to
/// the local state, both indexed `i + n_lp * d` for basis function `i` and
/// state component `d`.
pub trait LocalKernel {
    /// Number of state components.
    fn d_eq(&self) -> usize;
    /// Quadrature exactness degree for solution order `p`.
    fn quad_degree(&self, p: usize) -> usize;
    /// Local residual and Jacobian at the given local state.
    fn eval(&self, sh: &ElementShape<'_>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

/// Scalar Laplace kernel: `r_i = ∫ grad(u)·grad(v_i) − ∫ f v_i`.
#[derive(Debug, Clone, Copy)]
pub struct LaplaceKernel {
    /// Source term `f`.
    pub source: Source,
}

impl LocalKernel for LaplaceKernel {
    fn d_eq(&self) -> usize {
        1
    }

    fn quad_degree(&self, p: usize) -> usize {
        2 * p
    }

    fn eval(&self, sh: &ElementShape<'_>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n_lp = sh.l.ncols();
        let dim = sh.grads[0].ncols();
        let mut r = DVector::zeros(n_lp);
        let mut a = DMatrix::zeros(n_lp, n_lp);
        for (q, (&wq, g)) in sh.w.iter().zip(sh.grads).enumerate() {
            let f = self.source.eval(sh.phys[q]);
            let mut gu = [0.0; 2];
            for i in 0..n_lp {
                for c in 0..dim {
                    gu[c] += u[i] * g[(i, c)];
                }
            }
            for i in 0..n_lp {
                let mut acc = -f * sh.l[(q, i)];
                for c in 0..dim {
                    acc += g[(i, c)] * gu[c];
                }
                r[i] += wq * acc;
                for j in 0..n_lp {
                    let mut gg = 0.0;
                    for c in 0..dim {
                        gg += g[(i, c)] * g[(j, c)];
                    }
                    a[(i, j)] += wq * gg;
                }
            }
        }
        (r, a)
    }
}

/// Scalar diffusion with a constant metric tensor `K`:
/// `r_i = ∫ grad(v_i)·K grad(u)`.
///
/// This is the pulled-back form of the Laplace operator under an affine
/// geometry map with `K = det(G) G^{-1} G^{-T}`; assembling it on the
/// reference mesh must reproduce the deformed-mesh Laplace assembly exactly
/// when the map is affine.
#[derive(Debug, Clone, Copy)]
pub struct ConstantMetricKernel {
    /// Symmetric 2x2 metric, row-major.
    pub k: [[f64; 2]; 2],
}

impl LocalKernel for ConstantMetricKernel {
    fn d_eq(&self) -> usize {
        1
    }

    fn quad_degree(&self, p: usize) -> usize {
        2 * p
    }

    fn eval(&self, sh: &ElementShape<'_>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n_lp = sh.l.ncols();
        let mut a = DMatrix::zeros(n_lp, n_lp);
        for (&wq, g) in sh.w.iter().zip(sh.grads) {
            for i in 0..n_lp {
                for j in 0..n_lp {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for e in 0..2 {
                            acc += g[(i, c)] * self.k[c][e] * g[(j, e)];
                        }
                    }
                    a[(i, j)] += wq * acc;
                }
            }
        }
        let r = &a * u;
        (r, a)
    }
}

/// 1D pulled-back Laplace kernel for a piecewise-linear geometry map:
/// stiffness `∫ (1/Phi') u' v'` and source `∫ f(Phi(x)) Phi'(x) v`, both on
/// the reference mesh.
#[derive(Debug, Clone, Copy)]
pub struct MappedLaplace1DKernel {
    /// The 1D geometry map.
    pub phi: crate::geomap::PiecewiseLinearMap1D,
    /// Source term in physical coordinates.
    pub source: Source,
}

impl LocalKernel for MappedLaplace1DKernel {
    fn d_eq(&self) -> usize {
        1
    }

    fn quad_degree(&self, p: usize) -> usize {
        2 * p
    }

    fn eval(&self, sh: &ElementShape<'_>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n_lp = sh.l.ncols();
        let mut r = DVector::zeros(n_lp);
        let mut a = DMatrix::zeros(n_lp, n_lp);
        for (q, (&wq, g)) in sh.w.iter().zip(sh.grads).enumerate() {
            let x = sh.phys[q][0];
            let dphi = self.phi.deriv(x);
            let f = self.source.eval([self.phi.eval(x), 0.0]) * dphi;
            let mut du = 0.0;
            for i in 0..n_lp {
                du += u[i] * g[(i, 0)];
            }
            for i in 0..n_lp {
                r[i] += wq * (g[(i, 0)] * du / dphi - f * sh.l[(q, i)]);
                for j in 0..n_lp {
                    a[(i, j)] += wq * g[(i, 0)] * g[(j, 0)] / dphi;
                }
            }
        }
        (r, a)
    }
}

/// Steady viscous Burgers kernel with streamline-upwind stabilization.
///
/// State has two components; the Galerkin residual is
/// `∫ ((u·grad)u)·v + nu grad(u):grad(v)` and the stabilization adds
/// `alpha h_k ∫ R(u)·((u/||u||) · grad v)` with the strong residual
/// `R(u) = (u·grad)u − nu Lap(u)`; the second-derivative part is kept only
/// when the shape tensors carry basis Laplacians (straight-sided meshes).
/// The advection direction uses the regularized norm
/// `sqrt(||u||^2 + eps^2)`, eps = 1e-10, so the term switches off smoothly
/// near stagnation points. The Jacobian is exact for the implemented
/// residual, including the direction derivative.
#[derive(Debug, Clone, Copy)]
pub struct BurgersSupgKernel {
    /// Viscosity.
    pub nu: f64,
    /// Stabilization constant.
    pub alpha: f64,
}

impl LocalKernel for BurgersSupgKernel {
    fn d_eq(&self) -> usize {
        2
    }

    fn quad_degree(&self, p: usize) -> usize {
        2 * p + 2
    }

    fn eval(&self, sh: &ElementShape<'_>, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        const EPS: f64 = 1e-10;
        let n_lp = sh.l.ncols();
        let n = 2 * n_lp;
        let nu = self.nu;
        let ah = self.alpha * sh.h;
        let mut r = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, n);
        for (q, (&wq, g)) in sh.w.iter().zip(sh.grads).enumerate() {
            // Point values: state, gradient, convective term, Laplacian.
            let mut uv = [0.0; 2];
            let mut gu = [[0.0; 2]; 2]; // gu[d][c] = d u_d / d x_c
            let mut lapu = [0.0; 2];
            for i in 0..n_lp {
                for d in 0..2 {
                    let c = u[i + n_lp * d];
                    uv[d] += c * sh.l[(q, i)];
                    gu[d][0] += c * g[(i, 0)];
                    gu[d][1] += c * g[(i, 1)];
                    if let Some(lap) = sh.lap {
                        lapu[d] += c * lap[q][i];
                    }
                }
            }
            let conv = [
                uv[0] * gu[0][0] + uv[1] * gu[0][1],
                uv[0] * gu[1][0] + uv[1] * gu[1][1],
            ];
            let rs = [conv[0] - nu * lapu[0], conv[1] - nu * lapu[1]];
            let nrm = (uv[0] * uv[0] + uv[1] * uv[1] + EPS * EPS).sqrt();
            let beta = [uv[0] / nrm, uv[1] / nrm];

            // Streamline derivative of each test function, and of u.
            let mut bg = DVector::zeros(n_lp); // beta · grad(phi_i)
            let mut ug = DVector::zeros(n_lp); // u · grad(phi_i)
            for i in 0..n_lp {
                bg[i] = beta[0] * g[(i, 0)] + beta[1] * g[(i, 1)];
                ug[i] = uv[0] * g[(i, 0)] + uv[1] * g[(i, 1)];
            }

            for i in 0..n_lp {
                for d in 0..2 {
                    let mut acc = conv[d] * sh.l[(q, i)]
                        + nu * (gu[d][0] * g[(i, 0)] + gu[d][1] * g[(i, 1)]);
                    acc += ah * rs[d] * bg[i];
                    r[i + n_lp * d] += wq * acc;
                }
                for j in 0..n_lp {
                    let lap_j = sh.lap.map_or(0.0, |lap| lap[q][j]);
                    for d in 0..2 {
                        for e in 0..2 {
                            let delta = if d == e { 1.0 } else { 0.0 };
                            // d(conv[d]) / d u_{j,e}
                            let dconv = sh.l[(q, j)] * gu[d][e] + delta * ug[j];
                            // d(rs[d]) / d u_{j,e}
                            let drs = dconv - delta * nu * lap_j;
                            // d(bg[i]) / d u_{j,e} through the direction.
                            let dbg = sh.l[(q, j)]
                                * (g[(i, e)] / nrm - ug[i] * uv[e] / (nrm * nrm * nrm));
                            let mut acc = dconv * sh.l[(q, i)]
                                + delta * nu * (g[(j, 0)] * g[(i, 0)] + g[(j, 1)] * g[(i, 1)]);
                            acc += ah * (drs * bg[i] + rs[d] * dbg);
                            jac[(i + n_lp * d, j + n_lp * e)] += wq * acc;
                        }
                    }
                }
            }
        }
        (r, jac)
    }
}

// ------------------------------------------------------------------
// Unassembled tensors and global assembly
// ------------------------------------------------------------------

/// Element-local residual and Jacobian blocks prior to accumulation.
#[derive(Debug, Clone)]
pub struct UnassembledTensor {
    /// Number of state components.
    pub d_eq: usize,
    /// Local basis size.
    pub n_lp: usize,
    /// Listed element ids.
    pub elems: Vec<usize>,
    /// Local residuals, length `n_lp * d_eq`, indexed `i + n_lp * d`.
    pub residuals: Vec<DVector<f64>>,
    /// Local Jacobians, same indexing on both axes.
    pub jacobians: Vec<DMatrix<f64>>,
}

/// Evaluate the kernel on every element listed in the shape tensors.
pub fn local_tensors(
    mesh: &Mesh,
    st: &ShapeTensors,
    kernel: &dyn LocalKernel,
    u: &DVector<f64>,
) -> Result<UnassembledTensor> {
    let d_eq = kernel.d_eq();
    if u.len() != mesh.n_nodes() * d_eq {
        return Err(Error::Assembly(format!(
            "local_tensors: state length {} does not match {} dofs",
            u.len(),
            mesh.n_nodes() * d_eq
        )));
    }
    let mut residuals = Vec::with_capacity(st.elems.len());
    let mut jacobians = Vec::with_capacity(st.elems.len());
    for (slot, &k) in st.elems.iter().enumerate() {
        let u_local = mesh.element_restriction(k, u, d_eq);
        let (r, j) = kernel.eval(&st.elem(slot), &u_local);
        residuals.push(r);
        jacobians.push(j);
    }
    Ok(UnassembledTensor { d_eq, n_lp: st.n_lp, elems: st.elems.clone(), residuals, jacobians })
}

/// Accumulate local blocks into the global residual vector and sparse
/// Jacobian, optionally scaling each element block by a weight.
///
/// `rho`, when given, is aligned with `t.elems`. Accumulation runs in listed
/// element order, making the result bitwise reproducible.
pub fn global_assemble(
    t: &UnassembledTensor,
    mesh: &Mesh,
    rho: Option<&[f64]>,
) -> Result<(DVector<f64>, CsrMatrix)> {
    if let Some(rho) = rho {
        if rho.len() != t.elems.len() {
            return Err(Error::Assembly(format!(
                "global_assemble: {} weights for {} elements",
                rho.len(),
                t.elems.len()
            )));
        }
    }
    let n_hf = mesh.n_nodes();
    let n_dof = n_hf * t.d_eq;
    let mut res = DVector::zeros(n_dof);
    let mut trip = Triplets::new(n_dof, n_dof);
    for (slot, &k) in t.elems.iter().enumerate() {
        let scale = rho.map_or(1.0, |r| r[slot]);
        let conn = &mesh.elems[k];
        for i in 0..t.n_lp {
            for d in 0..t.d_eq {
                let ii = conn[i] + n_hf * d;
                res[ii] += scale * t.residuals[slot][i + t.n_lp * d];
                for j in 0..t.n_lp {
                    for e in 0..t.d_eq {
                        let jj = conn[j] + n_hf * e;
                        trip.push(ii, jj, scale * t.jacobians[slot][(i + t.n_lp * d, j + t.n_lp * e)])?;
                    }
                }
            }
        }
    }
    Ok((res, trip.to_csr()))
}

// ------------------------------------------------------------------
// Inner products
// ------------------------------------------------------------------

/// Assemble the scalar H1 inner-product matrix
/// `(w, v) = ∫ grad(w)·grad(v) + w v` on the undeformed mesh.
pub fn h1_matrix(mesh: &Mesh) -> Result<CsrMatrix> {
    let st = identity_shape_tensors(mesh, 2 * mesh.order)?;
    let n_hf = mesh.n_nodes();
    let mut trip = Triplets::new(n_hf, n_hf);
    for (slot, &k) in st.elems.iter().enumerate() {
        let sh = st.elem(slot);
        let conn = &mesh.elems[k];
        let n_lp = st.n_lp;
        let mut a = DMatrix::zeros(n_lp, n_lp);
        for (q, (&wq, g)) in sh.w.iter().zip(sh.grads).enumerate() {
            for i in 0..n_lp {
                for j in 0..n_lp {
                    let mut acc = sh.l[(q, i)] * sh.l[(q, j)];
                    for c in 0..mesh.dim {
                        acc += g[(i, c)] * g[(j, c)];
                    }
                    a[(i, j)] += wq * acc;
                }
            }
        }
        for i in 0..n_lp {
            for j in 0..n_lp {
                trip.push(conn[i], conn[j], a[(i, j)])?;
            }
        }
    }
    Ok(trip.to_csr())
}

/// Expand a scalar inner product into a block-diagonal vector-state product
/// with one positive weight per state component.
pub fn block_weighted_ip(scalar: &CsrMatrix, weights: &[f64]) -> Result<CsrMatrix> {
    let n = scalar.n_rows();
    let d_eq = weights.len();
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::Config(format!("block_weighted_ip: nonpositive weight in {weights:?}")));
    }
    let mut trip = Triplets::new(n * d_eq, n * d_eq);
    for (d, &wd) in weights.iter().enumerate() {
        for i in 0..n {
            let (cols, vals) = scalar.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                trip.push(i + n * d, j + n * d, wd * v)?;
            }
        }
    }
    Ok(trip.to_csr())
}

/// Largest-eigenvalue Gramian normalization per state component.
///
/// For each component block, forms the snapshot Gramian under the scalar
/// inner product and returns its largest eigenvalue; the block weight used by
/// [`block_weighted_ip`] is the reciprocal. Errors when a component vanishes
/// on every snapshot.
pub fn block_gramian_eigs(
    scalar: &CsrMatrix,
    snapshots: &[DVector<f64>],
    d_eq: usize,
) -> Result<Vec<f64>> {
    if snapshots.is_empty() {
        return Err(Error::Config("block_gramian_eigs: no snapshots".into()));
    }
    let n = scalar.n_rows();
    let ns = snapshots.len();
    let mut eigs = Vec::with_capacity(d_eq);
    for d in 0..d_eq {
        let blocks: Vec<DVector<f64>> =
            snapshots.iter().map(|s| DVector::from_fn(n, |i, _| s[i + n * d])).collect();
        let products: Vec<DVector<f64>> = blocks.iter().map(|b| scalar.matvec(b)).collect();
        let mut c = DMatrix::zeros(ns, ns);
        for i in 0..ns {
            for j in 0..ns {
                c[(i, j)] = blocks[i].dot(&products[j]);
            }
        }
        c = (&c + c.transpose()) * 0.5;
        let (vals, _) = sym_eig(&c)?;
        eigs.push(vals[0]);
    }
    // A component absent from every snapshot carries no energy to normalize;
    // report it as exactly zero so callers can skip its weighting.
    let top = eigs.iter().cloned().fold(0.0_f64, f64::max);
    if top <= 1e-14 {
        return Err(Error::Config(
            "block_gramian_eigs: all components vanish on all snapshots".into(),
        ));
    }
    for l in &mut eigs {
        if *l <= 1e-14 * top {
            *l = 0.0;
        }
    }
    Ok(eigs)
}

// ------------------------------------------------------------------
// Boundary integrals
// ------------------------------------------------------------------

/// Reference tangent of each triangle edge in its facet parameterization.
fn edge_tangent(facet: usize) -> [f64; 2] {
    match facet {
        0 => [1.0, 0.0],
        1 => [-1.0, 1.0],
        _ => [0.0, -1.0],
    }
}

/// Discrete boundary L2 norm of a (possibly vector) state over the facets
/// carrying one of the given tags.
///
/// In 1D the boundary is a set of points and the norm is the root sum of
/// squares of point values.
pub fn boundary_norm(mesh: &Mesh, tags: &[&str], w: &DVector<f64>, d_eq: usize) -> Result<f64> {
    let n_hf = mesh.n_nodes();
    if w.len() != n_hf * d_eq {
        return Err(Error::Assembly(format!(
            "boundary_norm: state length {} does not match {} dofs",
            w.len(),
            n_hf * d_eq
        )));
    }
    let mut acc = 0.0;
    if mesh.dim == 1 {
        for f in &mesh.facets {
            if !tags.contains(&f.tag.as_str()) {
                continue;
            }
            let local = mesh.ref_elem.facet_nodes(f.local_facet);
            let id = mesh.elems[f.elem][local[0]];
            for d in 0..d_eq {
                acc += w[id + n_hf * d].powi(2);
            }
        }
        return Ok(acc.sqrt());
    }
    let (rn, rw) = crate::quad::gauss_legendre_unit(mesh.order + 1);
    for f in &mesh.facets {
        if !tags.contains(&f.tag.as_str()) {
            continue;
        }
        let tref = edge_tangent(f.local_facet);
        let conn = &mesh.elems[f.elem];
        for (&r, &wr) in rn.iter().zip(&rw) {
            let x = mesh.ref_elem.facet_point(f.local_facet, r);
            let (g, _) = mesh.elemental_map_grad(f.elem, x);
            let tx = g[(0, 0)] * tref[0] + g[(0, 1)] * tref[1];
            let ty = g[(1, 0)] * tref[0] + g[(1, 1)] * tref[1];
            let arc = (tx * tx + ty * ty).sqrt();
            let basis = mesh.ref_elem.eval(x);
            for d in 0..d_eq {
                let mut val = 0.0;
                for (i, &id) in conn.iter().enumerate() {
                    val += w[id + n_hf * d] * basis[i];
                }
                acc += wr * arc * val * val;
            }
        }
    }
    Ok(acc.sqrt())
}

/// Scalar boundary mass matrix over the facets carrying one of the given
/// tags: `M_ij = ∫_Γ phi_i phi_j`; nonzeros touch boundary nodes only.
pub fn boundary_mass_matrix(mesh: &Mesh, tags: &[&str]) -> Result<CsrMatrix> {
    let n_hf = mesh.n_nodes();
    let mut trip = Triplets::new(n_hf, n_hf);
    if mesh.dim == 1 {
        for f in &mesh.facets {
            if tags.contains(&f.tag.as_str()) {
                let local = mesh.ref_elem.facet_nodes(f.local_facet);
                let id = mesh.elems[f.elem][local[0]];
                trip.push(id, id, 1.0)?;
            }
        }
        return Ok(trip.to_csr());
    }
    let (rn, rw) = crate::quad::gauss_legendre_unit(mesh.order + 1);
    for f in &mesh.facets {
        if !tags.contains(&f.tag.as_str()) {
            continue;
        }
        let tref = edge_tangent(f.local_facet);
        let conn = &mesh.elems[f.elem];
        for (&r, &wr) in rn.iter().zip(&rw) {
            let x = mesh.ref_elem.facet_point(f.local_facet, r);
            let (g, _) = mesh.elemental_map_grad(f.elem, x);
            let tx = g[(0, 0)] * tref[0] + g[(0, 1)] * tref[1];
            let ty = g[(1, 0)] * tref[0] + g[(1, 1)] * tref[1];
            let arc = (tx * tx + ty * ty).sqrt();
            let basis = mesh.ref_elem.eval(x);
            let local = mesh.ref_elem.facet_nodes(f.local_facet);
            for &i in &local {
                for &j in &local {
                    trip.push(conn[i], conn[j], wr * arc * basis[i] * basis[j])?;
                }
            }
        }
    }
    Ok(trip.to_csr())
}

// ------------------------------------------------------------------
// Extension operator / interior solves
// ------------------------------------------------------------------

/// Factored interior block of an SPD inner-product matrix.
///
/// Supports two operations that share the factorization: solving interior
/// systems (Riesz representers) and computing the minimum-norm extension of
/// Dirichlet boundary data.
#[derive(Debug, Clone)]
pub struct InteriorSolver {
    /// The Dirichlet/interior dof partition.
    pub dir: DirichletIndexSet,
    chol: BandedCholesky,
    /// Interior-row couplings to Dirichlet columns: (interior slot,
    /// Dirichlet slot, value).
    coupling: Vec<(usize, usize, f64)>,
}

/// Factor the interior block of `ip` with respect to the given partition.
pub fn interior_solver(ip: &CsrMatrix, dir: &DirichletIndexSet) -> Result<InteriorSolver> {
    if ip.n_rows() != dir.n_dof {
        return Err(Error::Assembly(format!(
            "interior_solver: matrix size {} does not match {} dofs",
            ip.n_rows(),
            dir.n_dof
        )));
    }
    let interior = ip.restrict(&dir.interior);
    let chol = BandedCholesky::factor(&interior)?;
    let mut dir_slot = std::collections::HashMap::new();
    for (t, &gj) in dir.indices.iter().enumerate() {
        dir_slot.insert(gj, t);
    }
    let mut coupling = Vec::new();
    for (s, &gi) in dir.interior.iter().enumerate() {
        let (cols, vals) = ip.row(gi);
        for (&gj, &v) in cols.iter().zip(vals) {
            if let Some(&t) = dir_slot.get(&gj) {
                coupling.push((s, t, v));
            }
        }
    }
    Ok(InteriorSolver { dir: dir.clone(), chol, coupling })
}

impl InteriorSolver {
    /// Solve the interior block for an interior-sized right-hand side.
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(r)
    }

    /// Minimum-energy extension of boundary values `h` (aligned with
    /// `dir.indices`): the result carries the exact trace and is
    /// inner-product-orthogonal to every interior test vector.
    pub fn extend(&self, h: &DVector<f64>) -> DVector<f64> {
        let mut rhs = DVector::zeros(self.dir.interior.len());
        for &(s, t, v) in &self.coupling {
            rhs[s] -= v * h[t];
        }
        let z = self.chol.solve(&rhs);
        let mut full = DVector::zeros(self.dir.n_dof);
        for (s, &gi) in self.dir.interior.iter().enumerate() {
            full[gi] = z[s];
        }
        for (t, &gj) in self.dir.indices.iter().enumerate() {
            full[gj] = h[t];
        }
        full
    }
}

// ------------------------------------------------------------------
// High-fidelity solvers
// ------------------------------------------------------------------

/// Gather `v` at the listed indices.
pub fn gather(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |s, _| v[idx[s]])
}

/// Solve a linear problem: assemble at the lifted Dirichlet state and take
/// one direct-solve correction on the interior dofs.
pub fn hf_solve_linear(
    mesh: &Mesh,
    st: &ShapeTensors,
    kernel: &dyn LocalKernel,
    dir: &DirichletIndexSet,
    h: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut u = DVector::zeros(dir.n_dof);
    for (t, &gj) in dir.indices.iter().enumerate() {
        u[gj] = h[t];
    }
    let t = local_tensors(mesh, st, kernel, &u)?;
    let (res, jac) = global_assemble(&t, mesh, None)?;
    let reduced = jac.restrict(&dir.interior);
    let rhs = -gather(&res, &dir.interior);
    let delta = sparse_solve(&reduced, &rhs)?;
    for (s, &gi) in dir.interior.iter().enumerate() {
        u[gi] += delta[s];
    }
    Ok(u)
}

/// Newton solver options.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    /// Relative convergence tolerance on the interior residual.
    pub tol: f64,
    /// Iteration cap (shared by continuation and Newton phases).
    pub max_iter: usize,
    /// Backtracking line-search halving cap.
    pub max_halvings: usize,
    /// Enable the pseudo-time continuation phase.
    pub continuation: bool,
    /// Initial pseudo-time step.
    pub tau0: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 100, max_halvings: 20, continuation: false, tau0: 1.0 }
    }
}

/// Row-sum lumped mass diagonal (one entry per dof).
pub fn lumped_mass_diag(mesh: &Mesh, st: &ShapeTensors, d_eq: usize) -> DVector<f64> {
    let n_hf = mesh.n_nodes();
    let mut diag = DVector::zeros(n_hf * d_eq);
    for (slot, &k) in st.elems.iter().enumerate() {
        let sh = st.elem(slot);
        for (q, &wq) in sh.w.iter().enumerate() {
            for (i, &id) in mesh.elems[k].iter().enumerate() {
                for d in 0..d_eq {
                    diag[id + n_hf * d] += wq * sh.l[(q, i)];
                }
            }
        }
    }
    diag
}

/// Add a diagonal contribution at the listed dofs.
fn add_diag(a: &CsrMatrix, idx: &[usize], vals: &DVector<f64>) -> Result<CsrMatrix> {
    let n = a.n_rows();
    let mut trip = Triplets::new(n, n);
    for i in 0..n {
        let (cols, vs) = a.row(i);
        for (&j, &v) in cols.iter().zip(vs) {
            trip.push(i, j, v)?;
        }
    }
    for &i in idx {
        trip.push(i, i, vals[i])?;
    }
    Ok(trip.to_csr())
}

/// Newton solver with backtracking line search, optionally preceded by
/// pseudo-time continuation.
///
/// Updates act on interior dofs only; the Dirichlet trace of `u0` is kept
/// verbatim. Continuation adds a lumped-mass/`tau` diagonal to the Jacobian
/// and doubles `tau` after every accepted step until the residual falls
/// below 1e-2 of its initial norm; plain Newton then runs to
/// `tol * max(1, initial)`. Divergence (10x growth over the best residual or
/// the iteration cap) raises a solver error carrying the residual history.
pub fn hf_solve_newton(
    mesh: &Mesh,
    st: &ShapeTensors,
    kernel: &dyn LocalKernel,
    dir: &DirichletIndexSet,
    u0: &DVector<f64>,
    opts: &NewtonOptions,
) -> Result<(DVector<f64>, Vec<f64>)> {
    if u0.len() != dir.n_dof {
        return Err(Error::Solver(format!(
            "newton: initial state length {} does not match {} dofs",
            u0.len(),
            dir.n_dof
        )));
    }
    let assemble = |u: &DVector<f64>| -> Result<(DVector<f64>, CsrMatrix)> {
        let t = local_tensors(mesh, st, kernel, u)?;
        global_assemble(&t, mesh, None)
    };
    let res_norm = |u: &DVector<f64>| -> Result<f64> {
        let t = local_tensors(mesh, st, kernel, u)?;
        let mut res = DVector::zeros(dir.n_dof);
        let n_hf = mesh.n_nodes();
        for (slot, &k) in t.elems.iter().enumerate() {
            for (i, &id) in mesh.elems[k].iter().enumerate() {
                for d in 0..t.d_eq {
                    res[id + n_hf * d] += t.residuals[slot][i + t.n_lp * d];
                }
            }
        }
        Ok(gather(&res, &dir.interior).norm())
    };

    let mut u = u0.clone();
    let mut history = Vec::new();
    let r0 = res_norm(&u)?;
    history.push(r0);
    let target = opts.tol * r0.max(1.0);
    let mut best = r0;
    let mut iter = 0usize;

    let fail = |history: &[f64], why: &str| -> Error {
        let tail: Vec<String> =
            history.iter().rev().take(6).rev().map(|r| format!("{r:.3e}")).collect();
        Error::Solver(format!("newton: {why}; residual history ... {}", tail.join(" -> ")))
    };

    // Pseudo-time continuation phase.
    if opts.continuation && r0 > target {
        let mass = lumped_mass_diag(mesh, st, kernel.d_eq());
        let mut tau = opts.tau0;
        let mut current = r0;
        while current > 1e-2 * r0 && current > target {
            iter += 1;
            if iter > opts.max_iter {
                return Err(fail(&history, "continuation exceeded the iteration cap"));
            }
            let (res, jac) = assemble(&u)?;
            let damped = add_diag(&jac, &dir.interior, &(&mass / tau))?;
            let reduced = damped.restrict(&dir.interior);
            let rhs = -gather(&res, &dir.interior);
            let delta = sparse_solve(&reduced, &rhs)?;
            let mut trial = u.clone();
            for (s, &gi) in dir.interior.iter().enumerate() {
                trial[gi] += delta[s];
            }
            let rn = res_norm(&trial)?;
            if rn < current {
                u = trial;
                current = rn;
                best = best.min(rn);
                history.push(rn);
                tau *= 2.0;
            } else {
                tau *= 0.5;
                history.push(rn);
                if tau < 1e-12 {
                    return Err(fail(&history, "continuation stalled (tau underflow)"));
                }
            }
            if current > 10.0 * best {
                return Err(fail(&history, "continuation diverged"));
            }
        }
    }

    // Newton phase with backtracking.
    let mut current = res_norm(&u)?;
    while current > target {
        iter += 1;
        if iter > opts.max_iter {
            return Err(fail(&history, "exceeded the iteration cap"));
        }
        let (res, jac) = assemble(&u)?;
        let reduced = jac.restrict(&dir.interior);
        let rhs = -gather(&res, &dir.interior);
        let delta = sparse_solve(&reduced, &rhs)?;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = u.clone();
            for (s, &gi) in dir.interior.iter().enumerate() {
                trial[gi] += step * delta[s];
            }
            let rn = res_norm(&trial)?;
            if rn < current {
                accepted = Some((trial, rn));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, rn)) = accepted else {
            return Err(fail(&history, "line search found no decrease"));
        };
        u = trial;
        current = rn;
        best = best.min(rn);
        history.push(rn);
        if current > 10.0 * best {
            return Err(fail(&history, "diverged"));
        }
    }
    Ok((u, history))
}

/// Assemble the 1D pulled-back Laplace system on the reference mesh:
/// stiffness with metric `1/Phi'` and the pulled-back source.
pub fn mtd_assemble_1d(
    mesh: &Mesh,
    phi: crate::geomap::PiecewiseLinearMap1D,
    source: Source,
) -> Result<(CsrMatrix, DVector<f64>)> {
    if mesh.dim != 1 {
        return Err(Error::Config("mtd_assemble_1d: mesh must be one-dimensional".into()));
    }
    let kernel = MappedLaplace1DKernel { phi, source };
    let st = identity_shape_tensors(mesh, kernel.quad_degree(mesh.order))?;
    let u = DVector::zeros(mesh.n_nodes());
    let t = local_tensors(mesh, &st, &kernel, &u)?;
    let (res, jac) = global_assemble(&t, mesh, None)?;
    Ok((jac, -res))
}
