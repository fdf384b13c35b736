//! Sparse matrices and a banded direct solver.
//!
//! High-fidelity systems here are 2D finite-element matrices with at most a
//! few tens of thousands of unknowns, so a bandwidth-reducing permutation
//! (reverse Cuthill-McKee) followed by a banded Cholesky (SPD) or banded LU
//! with partial pivoting (general) is a good fit: deterministic, dependency
//! free, and fast at this scale.

use nalgebra::DVector;

use crate::{Error, Result};

/// Coordinate-format accumulator for assembly; duplicate entries are summed
/// in a deterministic order when converting to CSR.
#[derive(Debug, Clone)]
pub struct Triplets {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Triplets {
    /// Empty accumulator of the given shape.
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Self { n_rows, n_cols, rows: Vec::new(), cols: Vec::new(), vals: Vec::new() }
    }

    /// Append one entry; out-of-range indices are an internal error.
    pub fn push(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if i >= self.n_rows || j >= self.n_cols {
            return Err(Error::Assembly(format!(
                "triplet index ({i},{j}) out of range for {}x{} matrix",
                self.n_rows, self.n_cols
            )));
        }
        self.rows.push(i);
        self.cols.push(j);
        self.vals.push(v);
        Ok(())
    }

    /// Compress to CSR, summing duplicates. Insertion order within a (row,
    /// col) pair is preserved before summation, so assembly is bitwise
    /// reproducible for a fixed element order.
    pub fn to_csr(&self) -> CsrMatrix {
        let nnz = self.vals.len();
        // Counting sort by row, stable in insertion order.
        let mut row_count = vec![0usize; self.n_rows + 1];
        for &r in &self.rows {
            row_count[r + 1] += 1;
        }
        for i in 0..self.n_rows {
            row_count[i + 1] += row_count[i];
        }
        let mut order = vec![0usize; nnz];
        let mut cursor = row_count.clone();
        for idx in 0..nnz {
            let r = self.rows[idx];
            order[cursor[r]] = idx;
            cursor[r] += 1;
        }
        // Within each row, stable sort by column.
        let mut row_ptr = vec![0usize; self.n_rows + 1];
        let mut col_idx = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for r in 0..self.n_rows {
            let slice = &mut order[row_count[r]..row_count[r + 1]];
            slice.sort_by_key(|&idx| self.cols[idx]);
            let mut i = 0;
            while i < slice.len() {
                let c = self.cols[slice[i]];
                let mut sum = 0.0;
                while i < slice.len() && self.cols[slice[i]] == c {
                    sum += self.vals[slice[i]];
                    i += 1;
                }
                col_idx.push(c);
                vals.push(sum);
            }
            row_ptr[r + 1] = col_idx.len();
        }
        CsrMatrix { n_rows: self.n_rows, n_cols: self.n_cols, row_ptr, col_idx, vals }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Number of rows.
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Number of columns.
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Stored nonzero count.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.vals[span])
    }

    /// Entry lookup (binary search within the row).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = DVector::zeros(self.n_rows);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            y[i] = acc;
        }
        y
    }

    /// Symmetric restriction to a sorted index subset (rows and columns).
    pub fn restrict(&self, keep: &[usize]) -> CsrMatrix {
        let mut new_id = vec![usize::MAX; self.n_cols];
        for (new, &old) in keep.iter().enumerate() {
            new_id[old] = new;
        }
        let mut t = Triplets::new(keep.len(), keep.len());
        for (new_i, &old_i) in keep.iter().enumerate() {
            let (cols, vals) = self.row(old_i);
            for (&c, &v) in cols.iter().zip(vals) {
                if new_id[c] != usize::MAX {
                    t.push(new_i, new_id[c], v).expect("in range");
                }
            }
        }
        t.to_csr()
    }

    /// Maximum absolute entry.
    pub fn amax(&self) -> f64 {
        self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute asymmetry `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity pattern.
///
/// Returns `perm` with `perm[new] = old`. Deterministic: components are
/// started from the lowest-index minimum-degree node and neighbor ties are
/// broken by node index.
pub fn rcm_ordering(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n_rows();
    // Symmetrized adjacency (excluding the diagonal).
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        let (cols, _) = a.row(i);
        for &j in cols {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        // Lowest-index node of minimum degree among the unvisited.
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i));
        let Some(start) = start else { break };
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> =
                adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| (degree[v], v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// Bandwidth of `a` under the permutation `perm[new] = old`.
fn permuted_bandwidth(a: &CsrMatrix, perm: &[usize]) -> usize {
    let n = a.n_rows();
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut bw = 0usize;
    for i in 0..n {
        let (cols, _) = a.row(i);
        for &j in cols {
            bw = bw.max(inv[i].abs_diff(inv[j]));
        }
    }
    bw
}

/// Banded Cholesky factorization of a symmetric positive-definite matrix,
/// preceded by a reverse Cuthill-McKee permutation.
///
/// Keep the factor around to amortize the factorization over many solves
/// (extension columns, Riesz representers).
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    /// Lower factor, row-major bands: entry (i, j), j in [i-bw, i], at
    /// `i*(bw+1) + (j + bw - i)`.
    low: Vec<f64>,
}

impl BandedCholesky {
    /// Factor `a`; fails if `a` is not numerically positive definite.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n_rows();
        if n != a.n_cols() {
            return Err(Error::Solver("cholesky: matrix not square".into()));
        }
        let perm = rcm_ordering(a);
        let bw = permuted_bandwidth(a, &perm);
        let mut inv_perm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let width = bw + 1;
        let mut low = vec![0.0f64; n * width];
        // Scatter the permuted lower triangle into band storage.
        for old_i in 0..n {
            let i = inv_perm[old_i];
            let (cols, vals) = a.row(old_i);
            for (&old_j, &v) in cols.iter().zip(vals) {
                let j = inv_perm[old_j];
                if j <= i {
                    low[i * width + (j + bw - i)] = v;
                }
            }
        }
        // In-place banded Cholesky.
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..i {
                let mut s = low[i * width + (j + bw - i)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= low[i * width + (k + bw - i)] * low[j * width + (k + bw - j)];
                }
                low[i * width + (j + bw - i)] = s / low[j * width + bw];
            }
            let mut d = low[i * width + bw];
            for k in j0..i {
                let l = low[i * width + (k + bw - i)];
                d -= l * l;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::Solver(format!(
                    "cholesky: non-positive pivot {d:.3e} at row {i} (matrix not SPD?)"
                )));
            }
            low[i * width + bw] = d.sqrt();
        }
        Ok(Self { n, bw, perm, low })
    }

    /// Solve `A x = b` using the stored factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n);
        let width = self.bw + 1;
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            y[i] = b[self.perm[i]];
        }
        // Forward substitution L y' = P b.
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            let mut s = y[i];
            for j in j0..i {
                s -= self.low[i * width + (j + self.bw - i)] * y[j];
            }
            y[i] = s / self.low[i * width + self.bw];
        }
        // Backward substitution L^T x' = y'.
        for i in (0..self.n).rev() {
            let mut s = y[i];
            let j1 = (i + self.bw).min(self.n - 1);
            for j in (i + 1)..=j1 {
                s -= self.low[j * width + (i + self.bw - j)] * y[j];
            }
            y[i] = s / self.low[i * width + self.bw];
        }
        let mut x = DVector::zeros(self.n);
        for i in 0..self.n {
            x[self.perm[i]] = y[i];
        }
        x
    }

    /// Bandwidth after permutation (diagnostic).
    pub fn bandwidth(&self) -> usize {
        self.bw
    }
}

/// Banded LU factorization with partial pivoting, after reverse
/// Cuthill-McKee; handles the nonsymmetric Jacobians of the nonlinear solver.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    /// Lower and original upper bandwidth (the symmetrized pattern bound).
    kl: usize,
    /// Effective upper bandwidth after pivoting fill: `2*kl`.
    kuw: usize,
    perm: Vec<usize>,
    /// Band storage, column-major: column j holds rows [j-kuw, j+kl] at
    /// `j*(kuw+kl+1) + (i + kuw - j)`.
    ab: Vec<f64>,
    /// Pivot row chosen at each elimination step (band-local row offsets).
    pivots: Vec<usize>,
}

impl BandedLu {
    /// Factor `a`; fails on a numerically singular pivot column.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n_rows();
        if n != a.n_cols() {
            return Err(Error::Solver("lu: matrix not square".into()));
        }
        let perm = rcm_ordering(a);
        let kl = permuted_bandwidth(a, &perm);
        let kuw = 2 * kl;
        let mut inv_perm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let width = kuw + kl + 1;
        let mut ab = vec![0.0f64; n * width];
        let at = |j: usize, i: usize| j * width + (i + kuw - j);
        for old_i in 0..n {
            let i = inv_perm[old_i];
            let (cols, vals) = a.row(old_i);
            for (&old_j, &v) in cols.iter().zip(vals) {
                let j = inv_perm[old_j];
                ab[at(j, i)] = v;
            }
        }
        let scale = ab.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut pivots = vec![0usize; n];
        for j in 0..n {
            let i_max = (j + kl).min(n - 1);
            // Partial pivot within the lower band of column j.
            let mut p = j;
            let mut best = ab[at(j, j)].abs();
            for i in (j + 1)..=i_max {
                let v = ab[at(j, i)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-14 * scale.max(1e-300) {
                return Err(Error::Solver(format!(
                    "lu: singular pivot {best:.3e} in column {j}"
                )));
            }
            pivots[j] = p;
            let c_max = (j + kuw).min(n - 1);
            if p != j {
                for c in j..=c_max {
                    ab.swap(at(c, j), at(c, p));
                }
            }
            let piv = ab[at(j, j)];
            for i in (j + 1)..=i_max {
                let m = ab[at(j, i)] / piv;
                ab[at(j, i)] = m;
                if m != 0.0 {
                    for c in (j + 1)..=c_max {
                        let u = ab[at(c, j)];
                        if u != 0.0 {
                            ab[at(c, i)] -= m * u;
                        }
                    }
                }
            }
        }
        Ok(Self { n, kl, kuw, perm, ab, pivots })
    }

    /// Solve `A x = b` using the stored factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        assert_eq!(b.len(), self.n);
        let width = self.kuw + self.kl + 1;
        let at = |j: usize, i: usize| j * width + (i + self.kuw - j);
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            y[i] = b[self.perm[i]];
        }
        // Apply row interchanges and forward-substitute L (unit diagonal).
        for j in 0..self.n {
            let p = self.pivots[j];
            if p != j {
                y.swap_rows(j, p);
            }
            let i_max = (j + self.kl).min(self.n - 1);
            let yj = y[j];
            if yj != 0.0 {
                for i in (j + 1)..=i_max {
                    y[i] -= self.ab[at(j, i)] * yj;
                }
            }
        }
        // Back-substitute U.
        for i in (0..self.n).rev() {
            let c_max = (i + self.kuw).min(self.n - 1);
            let mut s = y[i];
            for c in (i + 1)..=c_max {
                s -= self.ab[at(c, i)] * y[c];
            }
            y[i] = s / self.ab[at(i, i)];
        }
        let mut x = DVector::zeros(self.n);
        for i in 0..self.n {
            x[self.perm[i]] = y[i];
        }
        x
    }
}

/// One-shot sparse direct solve (banded LU with partial pivoting).
pub fn sparse_solve(a: &CsrMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.n_rows() != a.n_cols() {
        return Err(Error::Solver(format!(
            "sparse_solve: matrix is {}x{}, expected square",
            a.n_rows(),
            a.n_cols()
        )));
    }
    if a.n_rows() != b.len() {
        return Err(Error::Solver("sparse_solve: dimension mismatch".into()));
    }
    Ok(BandedLu::factor(a)?.solve(b))
}
