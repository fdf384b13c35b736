//! Lawson-Hanson nonnegative least squares with a relative-residual early exit.
//!
//! This is the workhorse behind every empirical-quadrature construction: the
//! constraint systems stacked by the offline stage are handed to [`nnls`]
//! (or [`nnls_signed`] for sign-unconstrained estimator weights) and the
//! support of the returned vector is the set of sampled elements.
//!
//! The tolerance plays a double role, matching the reference `lsqnonneg`
//! implementations: the solver exits early as soon as
//! `||G rho - b||_2 <= tol * ||b||_2`, and otherwise runs until every
//! zero-set dual is below `tol` (absolute). The early exit produces sparse
//! weights at loose tolerances; the dual threshold bounds the support when
//! the residual target sits below the constraint system's noise floor.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Sparse vector with strictly positive values on a sorted support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseNonnegVector {
    /// Total length (number of mesh elements for EQ weights).
    pub len: usize,
    /// Sorted support indices.
    pub indices: Vec<usize>,
    /// Values on the support, all `> 0`.
    pub values: Vec<f64>,
    /// Final residual norm `||G rho - b||_2` reached by the solver.
    pub residual: f64,
}

impl SparseNonnegVector {
    /// Support cardinality (`Q` in reduced-order-model reports).
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Expand into a dense vector.
    pub fn to_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Sparse vector with signed values on a sorted support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignedVector {
    /// Total length.
    pub len: usize,
    /// Sorted support indices.
    pub indices: Vec<usize>,
    /// Values on the support, all nonzero (either sign).
    pub values: Vec<f64>,
    /// Final residual norm reached by the solver.
    pub residual: f64,
}

impl SparseSignedVector {
    /// Support cardinality.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Expand into a dense vector.
    pub fn to_dense(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.len);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }
}

/// Nonnegative least squares `min ||G x - b||_2  s.t.  x >= 0`.
///
/// Lawson-Hanson active-set iteration with passive-set subproblems solved by
/// dense QR. Stops as soon as `||G x - b||_2 <= tol * ||b||_2` or when the
/// dual vector `G^T (b - G x)` is below `tol` everywhere off the support.
pub fn nnls(g: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<SparseNonnegVector> {
    let (x, residual) = nnls_core(g, b, tol)?;
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &v) in x.iter().enumerate() {
        if v > 0.0 {
            indices.push(i);
            values.push(v);
        }
    }
    Ok(SparseNonnegVector { len: g.ncols(), indices, values, residual })
}

/// Sign-unconstrained sparse least squares via the split `[G, -G]`.
///
/// Runs [`nnls`] on the column-doubled problem and returns
/// `x = x_plus - x_minus`. Inherits the residual-based early exit, so the
/// feasibility contract of [`nnls`] carries over verbatim.
pub fn nnls_signed(g: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<SparseSignedVector> {
    let n = g.ncols();
    let mut stacked = DMatrix::zeros(g.nrows(), 2 * n);
    stacked.view_mut((0, 0), (g.nrows(), n)).copy_from(g);
    stacked.view_mut((0, n), (g.nrows(), n)).copy_from(&(-g));
    let (x, residual) = nnls_core(&stacked, b, tol)?;
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for i in 0..n {
        let v = x[i] - x[n + i];
        if v != 0.0 {
            indices.push(i);
            values.push(v);
        }
    }
    Ok(SparseSignedVector { len: n, indices, values, residual })
}

/// Core active-set loop; returns the dense solution and its residual norm.
fn nnls_core(g: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, f64)> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Config(format!("nnls: tol {tol} not in (0,1)")));
    }
    if g.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("nnls: non-finite entries in G or b".into()));
    }
    let (m, n) = g.shape();
    let b_norm = b.norm();
    let target = tol * b_norm;
    // Scale used to decide when a stepped variable has numerically hit zero.
    let dual_scale = (g.transpose() * b).amax().max(1.0);
    // Column norms for the scale-invariant candidate ranking.
    let col_norms: Vec<f64> = (0..n).map(|j| g.column(j).norm()).collect();

    let mut x = DVector::<f64>::zeros(n);
    let mut passive: Vec<usize> = Vec::new();
    let mut in_passive = vec![false; n];
    // Columns rejected by the inner loop at the current iterate; cleared as
    // soon as the residual makes progress.
    let mut banned = vec![false; n];
    let mut residual_vec = b.clone();
    let mut residual = residual_vec.norm();

    let max_steps = (m * n).max(64);
    let mut steps = 0usize;
    // Retries after clearing the ban list; bounded so rejection cycles that
    // make no progress still terminate.
    let mut ban_resets = 0usize;
    // Candidate additions undone because they raised the residual. Near the
    // attainable optimum every remaining candidate gets reverted, so without
    // a cap the ban resets replay those expensive restorations over the
    // whole column set; accept the incumbent instead.
    let mut reverts = 0usize;
    // Churn guard: clean candidate additions strictly decrease the residual
    // and are bounded by the passive-set capacity, but near the numerical
    // floor the inner loop starts dropping variables it just added. Count
    // feasibility-restoration drops since the last meaningful improvement;
    // a large budget of them means the floor is reached.
    let mut churn = 0usize;
    let mut churn_anchor = residual;

    while residual > target {
        // Dual vector on the zero set; pick the steepest ascent column.
        let w = g.transpose() * &residual_vec;
        // A column is worth adding only while its dual exceeds `tol`: the
        // tolerance doubles as the absolute slack on the zero-set dual at a
        // non-early-exited return (the semantics of the reference
        // `lsqnonneg` implementations). On the quadrature constraint
        // systems, whose relative-residual target can sit below the
        // assembly noise floor, this is what lets the tolerance govern the
        // support size instead of grinding the support dense.
        let dual_floor = tol.max(10.0 * f64::EPSILON * dual_scale);
        let viable = |j: usize| w[j] > dual_floor;
        // Pick the column with the largest normalized dual (the steepest
        // single-column descent regardless of column scale).
        let score = |j: usize| w[j] / col_norms[j].max(f64::MIN_POSITIVE);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !in_passive[j] && !banned[j] && viable(j) {
                if best.map_or(true, |(_, sb)| score(j) > sb) {
                    best = Some((j, score(j)));
                }
            }
        }
        let Some((j_new, _)) = best else {
            // Columns rejected at an earlier iterate may be viable now; give
            // them a bounded number of second chances before declaring the
            // iterate optimal.
            let any_banned_viable = (0..n).any(|j| banned[j] && !in_passive[j] && viable(j));
            if any_banned_viable && ban_resets < 8 {
                ban_resets += 1;
                banned.iter_mut().for_each(|f| *f = false);
                continue;
            }
            break; // dual-feasible: optimum reached
        };
        let prev_x = x.clone();
        passive.push(j_new);
        in_passive[j_new] = true;

        // Inner loop: restore feasibility of the passive-set minimizer.
        loop {
            steps += 1;
            if std::env::var_os("DTM_NNLS_TRACE").is_some() && steps % 500 == 0 {
                eprintln!(
                    "nnls trace: steps={steps} m={m} n={n} residual={residual:.3e} \
                     target={target:.3e} passive={} reverts={reverts} churn={churn} \
                     resets={ban_resets}",
                    passive.len()
                );
            }
            if steps > max_steps {
                return Err(Error::Solver(format!(
                    "nnls: cycling guard tripped after {steps} passive-set solves"
                )));
            }
            let z = solve_passive(g, b, &passive)?;
            if z.iter().all(|&v| v > 0.0) {
                for (slot, &j) in passive.iter().enumerate() {
                    x[j] = z[slot];
                }
                break;
            }
            // Step toward z until the first passive variable hits zero.
            let mut alpha = f64::INFINITY;
            for (slot, &j) in passive.iter().enumerate() {
                if z[slot] <= 0.0 {
                    let t = x[j] / (x[j] - z[slot]);
                    if t < alpha {
                        alpha = t;
                    }
                }
            }
            for (slot, &j) in passive.iter().enumerate() {
                x[j] += alpha * (z[slot] - x[j]);
            }
            // Drop everything that reached (or crossed) zero.
            churn += 1;
            let mut kept = Vec::with_capacity(passive.len());
            for (slot, &j) in passive.iter().enumerate() {
                if z[slot] <= 0.0 && x[j] <= f64::EPSILON * dual_scale {
                    x[j] = 0.0;
                    in_passive[j] = false;
                } else {
                    kept.push(j);
                }
            }
            if kept.len() == passive.len() {
                // Numerical stall: force-drop the smallest passive value.
                let (&j_min, _) = passive
                    .iter()
                    .zip(passive.iter().map(|&j| x[j]))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"))
                    .expect("passive set nonempty");
                x[j_min] = 0.0;
                in_passive[j_min] = false;
                kept.retain(|&j| j != j_min);
            }
            passive = kept;
            if passive.is_empty() {
                break;
            }
        }

        residual_vec = b - g * &x;
        let new_residual = residual_vec.norm();
        if new_residual > residual + 1e-12 * b_norm.max(1.0) {
            // A forced drop in the inner loop can push the residual up; the
            // candidate did not help at this iterate, so revert and ban it.
            x = prev_x;
            for f in in_passive.iter_mut() {
                *f = false;
            }
            passive.clear();
            for (j, &v) in x.iter().enumerate() {
                if v > 0.0 {
                    passive.push(j);
                    in_passive[j] = true;
                }
            }
            banned[j_new] = true;
            residual_vec = b - g * &x;
            reverts += 1;
            if reverts > 32 {
                break; // incumbent is (near-)optimal; stop certifying
            }
            continue;
        }
        if !in_passive[j_new] {
            // The inner loop rejected the candidate at this iterate; do not
            // reconsider it until the residual moves.
            banned[j_new] = true;
        }
        if new_residual < residual - 1e-15 * b_norm.max(1.0) {
            banned.iter_mut().for_each(|f| *f = false);
            reverts = 0;
        }
        if new_residual < churn_anchor * 0.99 {
            churn = 0;
            churn_anchor = new_residual;
        } else if churn > 512 {
            residual = new_residual;
            break; // numerical floor: accept the incumbent
        }
        residual = new_residual;
        if passive.len() == n.min(m) {
            break; // passive set saturated; nothing more to add
        }
    }

    if std::env::var_os("DTM_NNLS_TRACE").is_some() {
        let q = x.iter().filter(|&&v| v > 0.0).count();
        eprintln!(
            "nnls done: m={m} n={n} residual={residual:.3e} target={target:.3e} q={q} \
             steps={steps}"
        );
    }
    Ok((x, residual))
}

/// Least-squares solve restricted to the passive columns, by column-pivoted QR.
fn solve_passive(g: &DMatrix<f64>, b: &DVector<f64>, passive: &[usize]) -> Result<DVector<f64>> {
    let m = g.nrows();
    let mut sub = DMatrix::zeros(m, passive.len());
    for (slot, &j) in passive.iter().enumerate() {
        sub.set_column(slot, &g.column(j));
    }
    let qr = sub.clone().qr();
    let qtb = qr.q().transpose() * b;
    if let Some(z) = qr.r().solve_upper_triangular(&qtb) {
        if z.iter().all(|v| v.is_finite()) {
            return Ok(z);
        }
    }
    // Degenerate passive set: fall back to the minimum-norm solution.
    super::dense::dense_lstsq(&sub, b)
}
