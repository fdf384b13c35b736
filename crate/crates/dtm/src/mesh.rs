//! Reference elements, meshes, elemental maps, and Dirichlet bookkeeping.
//!
//! A [`ReferenceElement`] carries the equispaced principal-lattice nodes of
//! the reference simplex and its Lagrange basis (computed once through a
//! monomial Vandermonde inverse). A [`Mesh`] couples node coordinates with an
//! `n_lp x N_e` connectivity table and string-tagged boundary facets; the
//! geometry order may be lower than the solution order (subparametric
//! elements), in which case only the vertex nodes drive the elemental map.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::quad::gauss_rule;
use crate::{Error, Result};

// ------------------------------------------------------------------
// Reference element
// ------------------------------------------------------------------

/// Reference simplex element with equispaced lattice nodes and its Lagrange
/// basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceElement {
    /// Spatial dimension D (1 or 2).
    pub dim: usize,
    /// Polynomial order p (1..3).
    pub order: usize,
    /// Lattice nodes; second coordinate zero in 1D.
    pub nodes: Vec<[f64; 2]>,
    /// Local node count: p+1 (1D), (p+1)(p+2)/2 (2D).
    pub n_lp: usize,
    /// Monomial exponents (a, b) with a + b <= p.
    monos: Vec<(u32, u32)>,
    /// Basis coefficients: basis i = sum_m coeffs[(m, i)] * X1^a_m X2^b_m.
    coeffs: DMatrix<f64>,
}

impl ReferenceElement {
    /// Build the reference element for dimension `dim` and order `order`.
    pub fn build(dim: usize, order: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) || !(1..=3).contains(&order) {
            return Err(Error::Config(format!(
                "reference element: unsupported (D, p) = ({dim}, {order})"
            )));
        }
        let p = order;
        let mut nodes = Vec::new();
        let mut monos = Vec::new();
        match dim {
            1 => {
                for i in 0..=p {
                    nodes.push([i as f64 / p as f64, 0.0]);
                    monos.push((i as u32, 0));
                }
            }
            _ => {
                for j in 0..=p {
                    for i in 0..=(p - j) {
                        nodes.push([i as f64 / p as f64, j as f64 / p as f64]);
                        monos.push((i as u32, j as u32));
                    }
                }
            }
        }
        let n_lp = nodes.len();
        // Vandermonde V[(i, m)] = mono_m(node_i); basis coeffs = V^-1.
        let v = DMatrix::from_fn(n_lp, n_lp, |i, m| {
            let (a, b) = monos[m];
            nodes[i][0].powi(a as i32) * nodes[i][1].powi(b as i32)
        });
        let coeffs = v
            .try_inverse()
            .ok_or_else(|| Error::Config("reference element: singular Vandermonde".into()))?;
        Ok(Self { dim, order, nodes, n_lp, monos, coeffs })
    }

    /// Evaluate all Lagrange basis functions at `x`.
    pub fn eval(&self, x: [f64; 2]) -> DVector<f64> {
        let mono = DVector::from_fn(self.n_lp, |m, _| {
            let (a, b) = self.monos[m];
            x[0].powi(a as i32) * x[1].powi(b as i32)
        });
        self.coeffs.transpose() * mono
    }

    /// Evaluate all basis gradients at `x`; row i holds grad l_i (n_lp x D).
    pub fn grad(&self, x: [f64; 2]) -> DMatrix<f64> {
        let mut dm = DMatrix::zeros(self.n_lp, self.dim);
        for m in 0..self.n_lp {
            let (a, b) = self.monos[m];
            let (a, b) = (a as i32, b as i32);
            let dx = if a == 0 { 0.0 } else { a as f64 * x[0].powi(a - 1) * x[1].powi(b) };
            dm[(m, 0)] = dx;
            if self.dim == 2 {
                let dy = if b == 0 { 0.0 } else { b as f64 * x[0].powi(a) * x[1].powi(b - 1) };
                dm[(m, 1)] = dy;
            }
        }
        self.coeffs.transpose() * dm
    }

    /// Second derivatives of all basis functions at `x`; row i holds
    /// (d²l_i/dX1², d²l_i/dX1dX2, d²l_i/dX2²).
    pub fn hess(&self, x: [f64; 2]) -> DMatrix<f64> {
        let mut dm = DMatrix::zeros(self.n_lp, 3);
        for m in 0..self.n_lp {
            let (a, b) = self.monos[m];
            let (a, b) = (a as i32, b as i32);
            let pow = |e: i32, v: f64| if e < 0 { 0.0 } else { v.powi(e) };
            dm[(m, 0)] = if a < 2 {
                0.0
            } else {
                (a * (a - 1)) as f64 * pow(a - 2, x[0]) * pow(b, x[1])
            };
            if self.dim == 2 {
                dm[(m, 1)] = if a < 1 || b < 1 {
                    0.0
                } else {
                    (a * b) as f64 * pow(a - 1, x[0]) * pow(b - 1, x[1])
                };
                dm[(m, 2)] = if b < 2 {
                    0.0
                } else {
                    (b * (b - 1)) as f64 * pow(a, x[0]) * pow(b - 2, x[1])
                };
            }
        }
        self.coeffs.transpose() * dm
    }

    /// Local ids of the simplex vertices within the lattice ordering.
    pub fn vertex_ids(&self) -> Vec<usize> {
        let p = self.order;
        match self.dim {
            1 => vec![0, p],
            _ => vec![0, p, self.n_lp - 1],
        }
    }

    /// Number of facets (2 in 1D, 3 edges in 2D).
    pub fn n_facets(&self) -> usize {
        if self.dim == 1 {
            2
        } else {
            3
        }
    }

    /// Local node ids lying on a facet, ordered along the facet.
    ///
    /// 2D edges: 0 is `X2 = 0`, 1 is the hypotenuse `X1 + X2 = 1`, 2 is
    /// `X1 = 0`.
    pub fn facet_nodes(&self, facet: usize) -> Vec<usize> {
        let p = self.order;
        match (self.dim, facet) {
            (1, 0) => vec![0],
            (1, 1) => vec![p],
            (2, f) => {
                let mut ids = Vec::new();
                for (i, node) in self.lattice_indices().into_iter().enumerate() {
                    let (a, b) = node;
                    let on = match f {
                        0 => b == 0,
                        1 => a + b == p,
                        2 => a == 0,
                        _ => panic!("facet {f} out of range"),
                    };
                    if on {
                        ids.push(i);
                    }
                }
                ids
            }
            _ => panic!("facet index out of range"),
        }
    }

    /// Reference coordinates of a facet parameterized by `r` in [0,1].
    pub fn facet_point(&self, facet: usize, r: f64) -> [f64; 2] {
        match (self.dim, facet) {
            (1, 0) => [0.0, 0.0],
            (1, 1) => [1.0, 0.0],
            (2, 0) => [r, 0.0],
            (2, 1) => [1.0 - r, r],
            (2, 2) => [0.0, 1.0 - r],
            _ => panic!("facet index out of range"),
        }
    }

    /// Integer lattice coordinates (i, j) of every local node.
    fn lattice_indices(&self) -> Vec<(usize, usize)> {
        let p = self.order;
        match self.dim {
            1 => (0..=p).map(|i| (i, 0)).collect(),
            _ => {
                let mut out = Vec::new();
                for j in 0..=p {
                    for i in 0..=(p - j) {
                        out.push((i, j));
                    }
                }
                out
            }
        }
    }
}

// ------------------------------------------------------------------
// Mesh
// ------------------------------------------------------------------

/// Boundary facet reference: element, local facet id, tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryFacet {
    /// Element index (0-based in memory).
    pub elem: usize,
    /// Local facet id within the reference element.
    pub local_facet: usize,
    /// Boundary tag (mapped to roles by the problem definition).
    pub tag: String,
}

/// Simplicial mesh with solution order `p` and geometry order
/// `geom_order <= p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    /// Spatial dimension.
    pub dim: usize,
    /// Solution order p.
    pub order: usize,
    /// Geometry order (1 = straight/subparametric, p = isoparametric).
    pub geom_order: usize,
    /// Node coordinates (second entry zero in 1D).
    pub nodes: Vec<[f64; 2]>,
    /// Connectivity: `elems[k]` lists the n_lp global node ids of element k.
    pub elems: Vec<Vec<usize>>,
    /// Tagged boundary facets.
    pub facets: Vec<BoundaryFacet>,
    /// Solution reference element.
    pub ref_elem: ReferenceElement,
    /// Geometry reference element.
    pub geo_elem: ReferenceElement,
    /// Local solution-node ids carrying the geometry basis (all nodes for
    /// isoparametric elements, vertices for geom_order = 1).
    pub geo_local: Vec<usize>,
}

/// Deformed node coordinates of a single element.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedElementNodes {
    /// Element id.
    pub elem: usize,
    /// Mapped coordinates of all n_lp solution nodes, local order.
    pub coords: Vec<[f64; 2]>,
}

/// Dirichlet/interior partition of the global degrees of freedom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirichletIndexSet {
    /// Sorted constrained dof ids (`node + N_hf * state` for vector states).
    pub indices: Vec<usize>,
    /// Sorted complement.
    pub interior: Vec<usize>,
    /// Total dof count `N_hf * D_eq`.
    pub n_dof: usize,
}

impl DirichletIndexSet {
    /// Number of constrained dofs (`M_hf`).
    pub fn m_hf(&self) -> usize {
        self.indices.len()
    }
}

impl Mesh {
    /// Assemble a mesh from parts, checking basic consistency.
    pub fn new(
        dim: usize,
        order: usize,
        geom_order: usize,
        nodes: Vec<[f64; 2]>,
        elems: Vec<Vec<usize>>,
        facets: Vec<BoundaryFacet>,
    ) -> Result<Self> {
        let ref_elem = ReferenceElement::build(dim, order)?;
        if geom_order != 1 && geom_order != order {
            return Err(Error::Config(format!(
                "mesh: geom_order {geom_order} must be 1 or equal to p = {order}"
            )));
        }
        let geo_elem = ReferenceElement::build(dim, geom_order)?;
        let geo_local =
            if geom_order == order { (0..ref_elem.n_lp).collect() } else { ref_elem.vertex_ids() };
        for (k, e) in elems.iter().enumerate() {
            if e.len() != ref_elem.n_lp {
                return Err(Error::Config(format!(
                    "mesh: element {k} has {} nodes, expected {}",
                    e.len(),
                    ref_elem.n_lp
                )));
            }
            if let Some(&bad) = e.iter().find(|&&id| id >= nodes.len()) {
                return Err(Error::Config(format!(
                    "mesh: element {k} references node {bad} out of {}",
                    nodes.len()
                )));
            }
        }
        for f in &facets {
            if f.elem >= elems.len() || f.local_facet >= ref_elem.n_facets() {
                return Err(Error::Config(format!(
                    "mesh: facet ({}, {}) out of range",
                    f.elem, f.local_facet
                )));
            }
        }
        Ok(Self { dim, order, geom_order, nodes, elems, facets, ref_elem, geo_elem, geo_local })
    }

    /// Node count `N_hf`.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Element count `N_e`.
    pub fn n_elems(&self) -> usize {
        self.elems.len()
    }

    /// Coordinates of all solution nodes of element `k`, local order.
    pub fn element_coords(&self, k: usize) -> Vec<[f64; 2]> {
        self.elems[k].iter().map(|&id| self.nodes[id]).collect()
    }

    /// Identity-deformation nodes of element `k`.
    pub fn identity_deformed(&self, k: usize) -> DeformedElementNodes {
        DeformedElementNodes { elem: k, coords: self.element_coords(k) }
    }

    /// Elemental map at reference point `x` using the stored coordinates.
    pub fn elemental_map(&self, k: usize, x: [f64; 2]) -> [f64; 2] {
        map_point(&self.geo_elem, &self.geo_local, &self.element_coords(k), x)
    }

    /// Gradient (D x D) and determinant of the elemental map at `x`.
    pub fn elemental_map_grad(&self, k: usize, x: [f64; 2]) -> (DMatrix<f64>, f64) {
        map_grad(self.dim, &self.geo_elem, &self.geo_local, &self.element_coords(k), x)
    }

    /// Deformed elemental map at `x` for externally supplied node positions.
    pub fn deformed_map(&self, d: &DeformedElementNodes, x: [f64; 2]) -> [f64; 2] {
        map_point(&self.geo_elem, &self.geo_local, &d.coords, x)
    }

    /// Gradient and determinant of the deformed elemental map.
    pub fn deformed_map_grad(&self, d: &DeformedElementNodes, x: [f64; 2]) -> (DMatrix<f64>, f64) {
        map_grad(self.dim, &self.geo_elem, &self.geo_local, &d.coords, x)
    }

    /// Dirichlet dof partition for the given facet tags and state count.
    pub fn extract_dirichlet_indices(
        &self,
        tags: &[&str],
        d_eq: usize,
    ) -> Result<DirichletIndexSet> {
        for &t in tags {
            if !self.facets.iter().any(|f| f.tag == t) {
                return Err(Error::Config(format!("mesh: unknown boundary tag '{t}'")));
            }
        }
        let n_hf = self.n_nodes();
        let mut on = vec![false; n_hf];
        for f in &self.facets {
            if tags.contains(&f.tag.as_str()) {
                for &loc in &self.ref_elem.facet_nodes(f.local_facet) {
                    on[self.elems[f.elem][loc]] = true;
                }
            }
        }
        let mut indices = Vec::new();
        for d in 0..d_eq {
            for (id, &flag) in on.iter().enumerate() {
                if flag {
                    indices.push(id + n_hf * d);
                }
            }
        }
        indices.sort_unstable();
        let mut interior = Vec::with_capacity(n_hf * d_eq - indices.len());
        let mut it = indices.iter().peekable();
        for i in 0..n_hf * d_eq {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                interior.push(i);
            }
        }
        Ok(DirichletIndexSet { indices, interior, n_dof: n_hf * d_eq })
    }

    /// Gather the local dof values of element `k` from a global vector
    /// (state blocks stacked: local slot `i + n_lp * d`).
    pub fn element_restriction(&self, k: usize, v: &DVector<f64>, d_eq: usize) -> DVector<f64> {
        let n_lp = self.ref_elem.n_lp;
        let n_hf = self.n_nodes();
        let mut out = DVector::zeros(n_lp * d_eq);
        for d in 0..d_eq {
            for (i, &id) in self.elems[k].iter().enumerate() {
                out[i + n_lp * d] = v[id + n_hf * d];
            }
        }
        out
    }

    /// Restrict every column of `basis` to every element: element k yields an
    /// `(n_lp * d_eq) x N` block.
    pub fn unassemble(&self, basis: &DMatrix<f64>, d_eq: usize) -> Vec<DMatrix<f64>> {
        let n_lp = self.ref_elem.n_lp;
        let n_hf = self.n_nodes();
        let n_cols = basis.ncols();
        (0..self.n_elems())
            .map(|k| {
                DMatrix::from_fn(n_lp * d_eq, n_cols, |slot, c| {
                    let (i, d) = (slot % n_lp, slot / n_lp);
                    basis[(self.elems[k][i] + n_hf * d, c)]
                })
            })
            .collect()
    }

    /// Full validation: connectivity (done at construction), boundary facets
    /// actually on the boundary, and positive map determinants at the
    /// quadrature points of the degree-2p rule.
    pub fn validate(&self) -> Result<()> {
        let quad = gauss_rule(self.dim, 2 * self.order)?;
        for k in 0..self.n_elems() {
            for q in &quad.points {
                let (_, det) = self.elemental_map_grad(k, *q);
                if det <= 0.0 {
                    return Err(Error::Config(format!(
                        "mesh: element {k} has non-positive map determinant {det:.3e}"
                    )));
                }
            }
        }
        if self.dim == 2 {
            let boundary = self.boundary_edge_set();
            for f in &self.facets {
                let nodes = self.ref_elem.facet_nodes(f.local_facet);
                let a = self.elems[f.elem][nodes[0]];
                let b = self.elems[f.elem][*nodes.last().expect("facet has nodes")];
                let key = (a.min(b), a.max(b));
                if !boundary.contains_key(&key) {
                    return Err(Error::Config(format!(
                        "mesh: facet ({}, {}) is not a boundary edge",
                        f.elem, f.local_facet
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map vertex-pair -> (element, local facet) for edges on the boundary
    /// (edges referenced by exactly one element).
    pub fn boundary_edge_set(&self) -> HashMap<(usize, usize), (usize, usize)> {
        let mut count: HashMap<(usize, usize), (usize, (usize, usize))> = HashMap::new();
        for k in 0..self.n_elems() {
            for f in 0..self.ref_elem.n_facets() {
                let nodes = self.ref_elem.facet_nodes(f);
                let a = self.elems[k][nodes[0]];
                let b = self.elems[k][*nodes.last().expect("facet has nodes")];
                let key = (a.min(b), a.max(b));
                count.entry(key).and_modify(|e| e.0 += 1).or_insert((1, (k, f)));
            }
        }
        count
            .into_iter()
            .filter(|(_, (c, _))| *c == 1)
            .map(|(key, (_, loc))| (key, loc))
            .collect()
    }

    /// Write the mesh in the versioned text format.
    pub fn write_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "dtm-mesh 1 {} {} {}", self.dim, self.order, self.geom_order).unwrap();
        writeln!(s, "nodes {}", self.n_nodes()).unwrap();
        for n in &self.nodes {
            if self.dim == 1 {
                writeln!(s, "{:.16e}", n[0]).unwrap();
            } else {
                writeln!(s, "{:.16e} {:.16e}", n[0], n[1]).unwrap();
            }
        }
        writeln!(s, "elements {}", self.n_elems()).unwrap();
        for e in &self.elems {
            let ids: Vec<String> = e.iter().map(|&id| (id + 1).to_string()).collect();
            writeln!(s, "{}", ids.join(" ")).unwrap();
        }
        writeln!(s, "facets {}", self.facets.len()).unwrap();
        for f in &self.facets {
            writeln!(s, "{} {} {}", f.elem + 1, f.local_facet + 1, f.tag).unwrap();
        }
        s
    }

    /// Write to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.write_text())?;
        Ok(())
    }

    /// Parse the versioned text format.
    pub fn read_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("mesh: empty file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "dtm-mesh" {
            return Err(Error::Format("mesh: bad header".into()));
        }
        if parts[1] != "1" {
            return Err(Error::Format(format!("mesh: unsupported version {}", parts[1])));
        }
        let dim: usize = parse(parts[2], "dimension")?;
        let order: usize = parse(parts[3], "order")?;
        let geom_order: usize = parse(parts[4], "geometry order")?;

        let (kind, count) = section(lines.next(), "nodes")?;
        if kind != "nodes" {
            return Err(Error::Format("mesh: expected 'nodes' section".into()));
        }
        let mut nodes = Vec::with_capacity(count);
        for _ in 0..count {
            let line =
                lines.next().ok_or_else(|| Error::Format("mesh: truncated nodes".into()))?;
            let c: Vec<&str> = line.split_whitespace().collect();
            if c.len() != dim {
                return Err(Error::Format(format!("mesh: node line '{line}' has wrong arity")));
            }
            let x: f64 = parse(c[0], "node coordinate")?;
            let y: f64 = if dim == 2 { parse(c[1], "node coordinate")? } else { 0.0 };
            nodes.push([x, y]);
        }

        let (kind, count) = section(lines.next(), "elements")?;
        if kind != "elements" {
            return Err(Error::Format("mesh: expected 'elements' section".into()));
        }
        let mut elems = Vec::with_capacity(count);
        for _ in 0..count {
            let line =
                lines.next().ok_or_else(|| Error::Format("mesh: truncated elements".into()))?;
            let ids: Result<Vec<usize>> = line
                .split_whitespace()
                .map(|t| {
                    let one_based: usize = parse(t, "element node id")?;
                    if one_based == 0 {
                        return Err(Error::Format("mesh: node id 0 (ids are 1-based)".into()));
                    }
                    Ok(one_based - 1)
                })
                .collect();
            elems.push(ids?);
        }

        let (kind, count) = section(lines.next(), "facets")?;
        if kind != "facets" {
            return Err(Error::Format("mesh: expected 'facets' section".into()));
        }
        let mut facets = Vec::with_capacity(count);
        for _ in 0..count {
            let line =
                lines.next().ok_or_else(|| Error::Format("mesh: truncated facets".into()))?;
            let c: Vec<&str> = line.split_whitespace().collect();
            if c.len() != 3 {
                return Err(Error::Format(format!("mesh: facet line '{line}' has wrong arity")));
            }
            let elem: usize = parse(c[0], "facet element")?;
            let lf: usize = parse(c[1], "facet local id")?;
            if elem == 0 || lf == 0 {
                return Err(Error::Format("mesh: facet ids are 1-based".into()));
            }
            facets.push(BoundaryFacet { elem: elem - 1, local_facet: lf - 1, tag: c[2].into() });
        }
        Mesh::new(dim, order, geom_order, nodes, elems, facets)
    }

    /// Load from a file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::read_text(&text)
    }
}

fn parse<T: std::str::FromStr>(token: &str, what: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| Error::Format(format!("mesh: cannot parse {what} from '{token}'")))
}

fn section(line: Option<&str>, what: &str) -> Result<(String, usize)> {
    let line = line.ok_or_else(|| Error::Format(format!("mesh: missing '{what}' section")))?;
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 2 {
        return Err(Error::Format(format!("mesh: bad section line '{line}'")));
    }
    Ok((parts[0].to_string(), parse(parts[1], "section count")?))
}

/// Geometry-basis point evaluation shared by stored and deformed coordinates.
fn map_point(
    geo: &ReferenceElement,
    geo_local: &[usize],
    coords: &[[f64; 2]],
    x: [f64; 2],
) -> [f64; 2] {
    let basis = geo.eval(x);
    let mut out = [0.0, 0.0];
    for (g, &loc) in geo_local.iter().enumerate() {
        out[0] += basis[g] * coords[loc][0];
        out[1] += basis[g] * coords[loc][1];
    }
    out
}

/// Geometry-basis gradient and determinant.
fn map_grad(
    dim: usize,
    geo: &ReferenceElement,
    geo_local: &[usize],
    coords: &[[f64; 2]],
    x: [f64; 2],
) -> (DMatrix<f64>, f64) {
    let grads = geo.grad(x); // n_geo x D
    let mut g = DMatrix::zeros(dim, dim);
    for (gi, &loc) in geo_local.iter().enumerate() {
        for a in 0..dim {
            for b in 0..dim {
                g[(a, b)] += coords[loc][a] * grads[(gi, b)];
            }
        }
    }
    let det = if dim == 1 { g[(0, 0)] } else { g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)] };
    (g, det)
}

// ------------------------------------------------------------------
// Structured generators
// ------------------------------------------------------------------

/// Coordinate-keyed node deduplication for mesh generators.
///
/// Keys round coordinates to 1e-9, which is far below any element size used
/// here and far above floating-point noise from evaluating the same curve
/// point along two patches.
#[derive(Debug, Default)]
pub struct NodeDedup {
    nodes: Vec<[f64; 2]>,
    lookup: HashMap<(i64, i64), usize>,
}

impl NodeDedup {
    /// Fresh empty table.
    pub fn new() -> Self {
        Self::default()
    }

    fn key(p: [f64; 2]) -> (i64, i64) {
        ((p[0] * 1e9).round() as i64, (p[1] * 1e9).round() as i64)
    }

    /// Insert or find the node at `p`, returning its id.
    pub fn insert(&mut self, p: [f64; 2]) -> usize {
        let key = Self::key(p);
        if let Some(&id) = self.lookup.get(&key) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(p);
        self.lookup.insert(key, id);
        id
    }

    /// Consume into the node list.
    pub fn into_nodes(self) -> Vec<[f64; 2]> {
        self.nodes
    }
}

/// Uniform 1D mesh of [0,1] with `n_e` elements; boundary tags `left`,
/// `right`.
pub fn unit_interval_mesh(n_e: usize, p: usize, geom_order: usize) -> Result<Mesh> {
    if n_e == 0 {
        return Err(Error::Config("unit_interval_mesh: n_e must be positive".into()));
    }
    let mut dedup = NodeDedup::new();
    let mut elems = Vec::with_capacity(n_e);
    for k in 0..n_e {
        let a = k as f64 / n_e as f64;
        let b = (k + 1) as f64 / n_e as f64;
        let mut ids = Vec::with_capacity(p + 1);
        for i in 0..=p {
            let x = a + (b - a) * i as f64 / p as f64;
            ids.push(dedup.insert([x, 0.0]));
        }
        elems.push(ids);
    }
    let facets = vec![
        BoundaryFacet { elem: 0, local_facet: 0, tag: "left".into() },
        BoundaryFacet { elem: n_e - 1, local_facet: 1, tag: "right".into() },
    ];
    Mesh::new(1, p, geom_order, dedup.into_nodes(), elems, facets)
}

/// Structured triangulation of an axis-aligned rectangle; each grid cell is
/// split into two triangles. Boundary tags: `left`, `right`, `bottom`, `top`.
/// High-order nodes are placed affinely (straight-sided elements).
pub fn rect_mesh(
    nx: usize,
    ny: usize,
    bounds: [f64; 4], // x0, x1, y0, y1
    p: usize,
    geom_order: usize,
) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::Config("rect_mesh: grid counts must be positive".into()));
    }
    let [x0, x1, y0, y1] = bounds;
    let xs: Vec<f64> = (0..=nx).map(|i| x0 + (x1 - x0) * i as f64 / nx as f64).collect();
    let ys: Vec<f64> = (0..=ny).map(|j| y0 + (y1 - y0) * j as f64 / ny as f64).collect();
    let corner_grid: Vec<Vec<[f64; 2]>> =
        xs.iter().map(|&x| ys.iter().map(|&y| [x, y]).collect()).collect();
    grid_to_mesh(&corner_grid, p, geom_order, "left", "right", "bottom", "top")
}

/// Triangulate a logically rectangular grid of corner points; used by both
/// [`rect_mesh`] and the curved-patch generators in the problems module.
///
/// `grid[i][j]` is the corner at column i, row j. High-order nodes are placed
/// by straight-edge interpolation within each cell.
pub fn grid_to_mesh(
    grid: &[Vec<[f64; 2]>],
    p: usize,
    geom_order: usize,
    tag_left: &str,
    tag_right: &str,
    tag_bottom: &str,
    tag_top: &str,
) -> Result<Mesh> {
    let nx = grid.len() - 1;
    let ny = grid[0].len() - 1;
    let mut dedup = NodeDedup::new();
    let mut elems: Vec<Vec<usize>> = Vec::with_capacity(2 * nx * ny);
    let ref_elem = ReferenceElement::build(2, p)?;
    for i in 0..nx {
        for j in 0..ny {
            let q = [grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]];
            // Two triangles: (0,1,2) and (0,2,3).
            for tri in [[q[0], q[1], q[2]], [q[0], q[2], q[3]]] {
                let mut ids = Vec::with_capacity(ref_elem.n_lp);
                for node in &ref_elem.nodes {
                    let (l0, l1, l2) = (1.0 - node[0] - node[1], node[0], node[1]);
                    let x = [
                        l0 * tri[0][0] + l1 * tri[1][0] + l2 * tri[2][0],
                        l0 * tri[0][1] + l1 * tri[1][1] + l2 * tri[2][1],
                    ];
                    ids.push(dedup.insert(x));
                }
                elems.push(ids);
            }
        }
    }
    let nodes = dedup.into_nodes();
    // Tag the outer boundary edges by position in the logical grid.
    let mut facets = Vec::new();
    let mut tag_edge = |k: usize, f: usize, tag: &str| {
        facets.push(BoundaryFacet { elem: k, local_facet: f, tag: tag.into() });
    };
    for i in 0..nx {
        for j in 0..ny {
            let cell = 2 * (i * ny + j);
            // Triangle (0,1,2): edge 0 = bottom of the cell, edge 1 = right.
            if j == 0 {
                tag_edge(cell, 0, tag_bottom);
            }
            if i + 1 == nx {
                tag_edge(cell, 1, tag_right);
            }
            // Triangle (0,2,3): edge 1 = top of the cell, edge 2 = left.
            if j + 1 == ny {
                tag_edge(cell + 1, 1, tag_top);
            }
            if i == 0 {
                tag_edge(cell + 1, 2, tag_left);
            }
        }
    }
    Mesh::new(2, p, geom_order, nodes, elems, facets)
}

/// Deterministically perturb the interior vertices of a structured mesh to
/// make it "unstructured" for equivalence tests. `amount` is relative to the
/// minimum vertex spacing; high-order nodes are re-placed affinely.
pub fn perturb_interior(mesh: &Mesh, amount: f64, seed: u64) -> Result<Mesh> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Vertices on any boundary edge stay put.
    let mut on_boundary = vec![false; mesh.n_nodes()];
    for (key, _) in mesh.boundary_edge_set() {
        on_boundary[key.0] = true;
        on_boundary[key.1] = true;
    }
    // Also freeze every non-vertex node: they get re-placed from vertices.
    let vertex_ids = mesh.ref_elem.vertex_ids();
    let mut is_vertex = vec![false; mesh.n_nodes()];
    for e in &mesh.elems {
        for &vi in &vertex_ids {
            is_vertex[e[vi]] = true;
        }
    }
    // Minimum vertex spacing for scaling.
    let mut h_min = f64::INFINITY;
    for e in &mesh.elems {
        for w in vertex_ids.windows(2) {
            let a = mesh.nodes[e[w[0]]];
            let b = mesh.nodes[e[w[1]]];
            h_min = h_min.min(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    let mut nodes = mesh.nodes.clone();
    for (id, node) in nodes.iter_mut().enumerate() {
        if is_vertex[id] && !on_boundary[id] {
            node[0] += amount * h_min * rng.random_range(-1.0..1.0);
            node[1] += amount * h_min * rng.random_range(-1.0..1.0);
        }
    }
    // Re-place high-order nodes from the perturbed vertices.
    let mut elems = mesh.elems.clone();
    let mut new_nodes = NodeDedup::new();
    let mut remap: HashMap<usize, usize> = HashMap::new();
    for id in 0..mesh.n_nodes() {
        if is_vertex[id] {
            remap.insert(id, new_nodes.insert(nodes[id]));
        }
    }
    for e in elems.iter_mut() {
        let tri: Vec<[f64; 2]> = vertex_ids.iter().map(|&vi| nodes[e[vi]]).collect();
        for (loc, node) in mesh.ref_elem.nodes.iter().enumerate() {
            if vertex_ids.contains(&loc) {
                e[loc] = remap[&e[loc]];
            } else {
                let (l0, l1, l2) = (1.0 - node[0] - node[1], node[0], node[1]);
                let x = [
                    l0 * tri[0][0] + l1 * tri[1][0] + l2 * tri[2][0],
                    l0 * tri[0][1] + l1 * tri[1][1] + l2 * tri[2][1],
                ];
                e[loc] = new_nodes.insert(x);
            }
        }
    }
    Mesh::new(
        mesh.dim,
        mesh.order,
        mesh.geom_order,
        new_nodes.into_nodes(),
        elems,
        mesh.facets.clone(),
    )
}
